use super::{ModelError, TokenKind, TokenSequence};
use crate::data::TokenGrid;
use crate::tensor::RowRotation;

/// Rotation table for `width` channels: the first half of the channel pairs
/// turn with the frame index, the rest with the spatial index. Visual and
/// reference tokens are rotated; text and `<CLS>` tokens are not.
///
/// Angles depend only on `(frame, spatial)`, so a single image (frame ≡ 1)
/// uses exactly the frame-1 rows of a video table.
pub fn rope_table(seq: &TokenSequence, width: usize, base: f64) -> Result<RowRotation, ModelError> {
    if width == 0 || width % 2 != 0 {
        return Err(ModelError::Domain(format!(
            "rotary width {width} must be even and positive"
        )));
    }
    let pairs = width / 2;
    let frame_pairs = pairs / 2;
    let spatial_pairs = pairs - frame_pairs;
    let freq = |k: usize, n: usize| base.powf(-(k as f64) / n.max(1) as f64);
    let cos_sin = seq
        .positions
        .iter()
        .zip(&seq.kinds)
        .map(|(pos, kind)| match kind {
            TokenKind::NoisyVisual | TokenKind::Reference => Some(
                (0..pairs)
                    .map(|j| {
                        let angle = if j < frame_pairs {
                            pos.frame as f64 * freq(j, frame_pairs)
                        } else {
                            pos.spatial as f64 * freq(j - frame_pairs, spatial_pairs)
                        };
                        (angle.cos(), angle.sin())
                    })
                    .collect(),
            ),
            TokenKind::Text | TokenKind::Cls => None,
        })
        .collect();
    Ok(RowRotation { cos_sin })
}

/// Rotates every visual token of `seq` over its full width.
pub fn apply_rope(seq: &TokenSequence, base: f64) -> Result<TokenSequence, ModelError> {
    let d = seq.tokens.dim();
    let table = rope_table(seq, d, base)?;
    let tokens = TokenGrid::new(
        seq.tokens.rows(),
        d,
        table.apply(seq.tokens.data(), d, false),
    )?;
    Ok(TokenSequence {
        tokens,
        ..seq.clone()
    })
}
