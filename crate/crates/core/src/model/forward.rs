use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::rope::rope_table;
use super::{AdapterTarget, DenoiserParams, ModelError, ParamRole};
use crate::data::TokenGrid;
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Role of a token in the joint sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    NoisyVisual,
    Reference,
    Text,
    /// Learned reference-slot token; its row in `tokens` is ignored.
    Cls,
}

impl TokenKind {
    fn row(self) -> usize {
        match self {
            TokenKind::NoisyVisual => 0,
            TokenKind::Reference => 1,
            TokenKind::Text => 2,
            TokenKind::Cls => 3,
        }
    }
}

/// 1-based frame index and 0-based spatial index of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub frame: usize,
    pub spatial: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: TokenGrid,
    pub positions: Vec<Position>,
    pub kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn noisy_rows(&self) -> Vec<usize> {
        self.rows_of(TokenKind::NoisyVisual)
    }

    pub fn rows_of(&self, kind: TokenKind) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tokens.rows() != self.kinds.len() || self.positions.len() != self.kinds.len() {
            return Err(ModelError::Domain(format!(
                "sequence has {} tokens, {} positions, {} kinds",
                self.tokens.rows(),
                self.positions.len(),
                self.kinds.len()
            )));
        }
        for (pos, kind) in self.positions.iter().zip(&self.kinds) {
            if matches!(kind, TokenKind::NoisyVisual | TokenKind::Reference) && pos.frame == 0 {
                return Err(ModelError::Domain(
                    "visual frame indices are 1-based".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// When false, adapters are skipped entirely (frozen-base reference).
    pub adapters: bool,
    /// Number of diffusion timesteps; `timestep` must be below it.
    pub num_steps: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            adapters: true,
            num_steps: 50,
        }
    }
}

/// Multiply-accumulate counts of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Attention scores plus value mixing, all heads and blocks.
    pub attention_macs: u64,
}

/// v-prediction for every noisy-visual token, in sequence order.
pub fn forward(
    params: &DenoiserParams,
    seq: &TokenSequence,
    timestep: usize,
) -> Result<Tensor, ModelError> {
    forward_with(params, seq, timestep, ForwardOptions::default()).map(|(t, _)| t)
}

pub fn forward_with(
    params: &DenoiserParams,
    seq: &TokenSequence,
    timestep: usize,
    opts: ForwardOptions,
) -> Result<(Tensor, ForwardStats), ModelError> {
    let mut tape = Tape::new();
    let vars = push_trainable(&mut tape, params, false);
    let mut stats = ForwardStats::default();
    let out = forward_on_tape(&mut tape, params, &vars, seq, timestep, opts, &mut stats)?;
    Ok((tape.value(out).clone(), stats))
}

/// Leaves for every trainable tensor, in index order.
pub(crate) fn push_trainable(tape: &mut Tape, params: &DenoiserParams, grad: bool) -> Vec<Var> {
    params
        .trainable()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = if grad {
                t.clone().with_grad()
            } else {
                t.clone()
            };
            tape.param(ParamId(i), t)
        })
        .collect()
}

fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut e = vec![0.0; d];
    for i in 0..half {
        let w = 100f64.powf(-(i as f64) / half as f64);
        e[2 * i] = (t as f64 * w).sin();
        e[2 * i + 1] = (t as f64 * w).cos();
    }
    e
}

struct Adapters {
    /// `(A, B)` leaf per `(block, target)`.
    pairs: Vec<Vec<Option<(Var, Var)>>>,
    cls: Var,
}

fn locate(params: &DenoiserParams, vars: &[Var]) -> Adapters {
    let blocks = params.config().blocks;
    let mut pairs = vec![vec![None; AdapterTarget::ALL.len()]; blocks];
    let mut a_of = vec![vec![None; AdapterTarget::ALL.len()]; blocks];
    let mut cls = None;
    for (e, &v) in params.trainable_index().iter().zip(vars) {
        match e.role {
            ParamRole::AdapterA { block, target } => a_of[block][target as usize] = Some(v),
            ParamRole::AdapterB { block, target } => {
                let a = a_of[block][target as usize].expect("A precedes B in the index");
                pairs[block][target as usize] = Some((a, v));
            }
            ParamRole::Cls => cls = Some(v),
        }
    }
    Adapters {
        pairs,
        cls: cls.expect("cls is always indexed"),
    }
}

/// `x Wᵀ + (α/r) (x Aᵀ) Bᵀ`.
fn adapted_linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    scale: f64,
) -> Result<Var, ModelError> {
    let base = tape.matmul_nt(x, w)?;
    let Some((a, b)) = adapter else {
        return Ok(base);
    };
    let down = tape.matmul_nt(x, a)?;
    let up = tape.matmul_nt(down, b)?;
    let up = tape.scale(up, scale)?;
    Ok(tape.add(base, up)?)
}

const LN_EPS: f64 = 1e-5;

pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    params: &DenoiserParams,
    vars: &[Var],
    seq: &TokenSequence,
    timestep: usize,
    opts: ForwardOptions,
    stats: &mut ForwardStats,
) -> Result<Var, ModelError> {
    seq.validate()?;
    if timestep >= opts.num_steps {
        return Err(ModelError::Domain(format!(
            "timestep {timestep} outside [0, {})",
            opts.num_steps
        )));
    }
    let noisy = seq.noisy_rows();
    if noisy.is_empty() {
        return Err(ModelError::Domain(
            "sequence has no noisy-visual tokens".into(),
        ));
    }
    let cfg = params.config();
    let (d, hd) = (cfg.dim, cfg.head_dim());
    if seq.tokens.dim() != d {
        return Err(ModelError::Domain(format!(
            "token width {} for a width-{d} model",
            seq.tokens.dim()
        )));
    }
    let len = seq.len();
    let base = params.base();
    let adapters = locate(params, vars);
    let lookup = |block: usize, target: AdapterTarget| {
        if opts.adapters {
            adapters.pairs[block][target as usize]
        } else {
            None
        }
    };
    let scale = params.adapter_scale();

    // Input embedding: projected tokens + kind embedding + timestep embedding
    // (+ the learned <CLS> vector on its rows).
    let temb = timestep_embedding(timestep, d);
    let offsets = Tensor::from_fn(len, d, |r, c| {
        base.kind_embed.at(seq.kinds[r].row(), c) + temb[c]
    });
    let x = tape.constant(Tensor::new(vec![len, d], seq.tokens.data().to_vec())?);
    let w_in = tape.constant(base.w_in.clone());
    let mut h = tape.matmul_nt(x, w_in)?;
    let off = tape.constant(offsets);
    h = tape.add(h, off)?;
    let cls_rows = seq.rows_of(TokenKind::Cls);
    if !cls_rows.is_empty() {
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let table = tape.concat_rows(&[zero, adapters.cls])?;
        let pick: Vec<usize> = seq
            .kinds
            .iter()
            .map(|&k| usize::from(k == TokenKind::Cls))
            .collect();
        let cls = tape.gather_rows(table, &pick)?;
        h = tape.add(h, cls)?;
    }

    let rope = Arc::new(rope_table(seq, hd, cfg.rope_base)?);
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    for (bi, bw) in base.blocks.iter().enumerate() {
        let a = tape.layer_norm(h, LN_EPS)?;
        let proj =
            |target: AdapterTarget, w: &Tensor, tape: &mut Tape| -> Result<Var, ModelError> {
                let w = tape.constant(w.clone());
                adapted_linear(tape, a, w, lookup(bi, target), scale)
            };
        let q = proj(AdapterTarget::Q, &bw.wq, tape)?;
        let k = proj(AdapterTarget::K, &bw.wk, tape)?;
        let v = proj(AdapterTarget::V, &bw.wv, tape)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let qh = tape.rotate(qh, rope.clone())?;
            let kh = tape.rotate(kh, rope.clone())?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
            stats.attention_macs += 2 * (len * len * hd) as u64;
        }
        let mixed = tape.concat_cols(&heads)?;
        let wo = tape.constant(bw.wo.clone());
        let o = adapted_linear(tape, mixed, wo, lookup(bi, AdapterTarget::O), scale)?;
        h = tape.add(h, o)?;

        let b = tape.layer_norm(h, LN_EPS)?;
        let ff1 = tape.constant(bw.ff1.clone());
        let hidden = tape.matmul_nt(b, ff1)?;
        let hidden = tape.silu(hidden)?;
        let ff2 = tape.constant(bw.ff2.clone());
        let f = adapted_linear(tape, hidden, ff2, lookup(bi, AdapterTarget::Ff2), scale)?;
        h = tape.add(h, f)?;
    }
    let n = tape.layer_norm(h, LN_EPS)?;
    let w_out = tape.constant(base.w_out.clone());
    let out = tape.matmul_nt(n, w_out)?;
    Ok(tape.gather_rows(out, &noisy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::RngStream;

    fn random_params(seed: u64) -> DenoiserParams {
        let mut p = init_model(&ModelConfig::default(), seed).unwrap();
        let mut rng = RngStream::new(seed, 99);
        let vals = p
            .trainable()
            .iter()
            .map(|t| Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng))
            .collect();
        p.set_trainable(vals).unwrap();
        p
    }

    fn sequence(seed: u64, refs: usize) -> TokenSequence {
        let mut rng = RngStream::new(seed, 1);
        let (n, d) = (4, 16);
        let total = n + refs + 2;
        let mut kinds = vec![TokenKind::NoisyVisual; n];
        kinds.extend(vec![TokenKind::Reference; refs]);
        kinds.extend([TokenKind::Cls, TokenKind::Text]);
        let positions = (0..total)
            .map(|i| Position {
                frame: 1,
                spatial: if i < n { i } else { (i - n) % n },
            })
            .collect();
        TokenSequence {
            tokens: TokenGrid::new(total, d, (0..total * d).map(|_| rng.normal()).collect())
                .unwrap(),
            positions,
            kinds,
        }
    }

    #[test]
    fn zero_adapters_match_frozen_base() {
        let p = init_model(&ModelConfig::default(), 2).unwrap();
        let s = sequence(0, 3);
        let with = forward(&p, &s, 10).unwrap();
        let (without, _) = forward_with(
            &p,
            &s,
            10,
            ForwardOptions {
                adapters: false,
                ..ForwardOptions::default()
            },
        )
        .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn merged_weights_match_adapters() {
        let p = random_params(5);
        let s = sequence(1, 3);
        let a = forward(&p, &s, 20).unwrap();
        let b = forward(&p.merged().unwrap(), &s, 20).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn reference_permutation_invariance() {
        let p = random_params(7);
        let s = sequence(2, 4);
        let mut perm = s.clone();
        let order = [4usize, 7, 5, 6]; // reference rows 4..8 shuffled
        let mut data = s.tokens.data().to_vec();
        for (slot, &src) in (4..8).zip(&order) {
            data[slot * 16..(slot + 1) * 16].copy_from_slice(s.tokens.row(src));
            perm.positions[slot] = s.positions[src];
        }
        perm.tokens = TokenGrid::new(s.len(), 16, data).unwrap();
        let a = forward(&p, &s, 3).unwrap();
        let b = forward(&p, &perm, 3).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_visual_set_is_rejected() {
        let p = init_model(&ModelConfig::default(), 0).unwrap();
        let mut s = sequence(0, 0);
        s.kinds.iter_mut().for_each(|k| {
            if *k == TokenKind::NoisyVisual {
                *k = TokenKind::Reference
            }
        });
        assert!(matches!(forward(&p, &s, 0), Err(ModelError::Domain(_))));
    }

    #[test]
    fn attention_cost_is_quadratic() {
        let p = init_model(&ModelConfig::default(), 0).unwrap();
        let s = sequence(0, 4);
        let (_, stats) = forward_with(&p, &s, 0, ForwardOptions::default()).unwrap();
        assert_eq!(stats.attention_macs, 2 * 2 * 2 * (10 * 10 * 8));
    }
}
