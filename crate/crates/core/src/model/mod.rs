//! Miniature diffusion transformer with low-rank adapters.
//!
//! The base network (input map, token-kind embedding, pre-norm attention and
//! feed-forward blocks, output map) is drawn once from a seeded Gaussian and
//! never trained. Training touches only the adapter pairs `(A, B)` on the
//! attention projections and the second feed-forward projection, plus the
//! learned `<CLS>` reference-slot embedding. An adapted layer computes
//! `x (W + (α/r) B A)ᵀ`.

mod checkpoint;
mod forward;
mod loss;
mod rope;
mod schedule;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{
    forward, forward_with, ForwardOptions, ForwardStats, Position, TokenKind, TokenSequence,
};
pub use loss::{
    build_sequence, prepare_batch, task_loss, Batch, LossModel, LossOptions, PreparedSample,
    TaskKind, VPredictionLoss,
};
pub use rope::{apply_rope, rope_table};
pub use schedule::{add_noise, DiffusionSchedule};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::DataError;
use crate::tensor::{streams, ParamId, RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("adapter rank {rank} exceeds min(d_in, d_out) = {limit} for {layer}")]
    Rank {
        layer: String,
        rank: usize,
        limit: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("frozen-weight violation: {0}")]
    FrozenViolation(String),
}

/// Layer carrying an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
    Ff2,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 5] = [
        AdapterTarget::Q,
        AdapterTarget::K,
        AdapterTarget::V,
        AdapterTarget::O,
        AdapterTarget::Ff2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterTarget::Q => "q",
            AdapterTarget::K => "k",
            AdapterTarget::V => "v",
            AdapterTarget::O => "o",
            AdapterTarget::Ff2 => "ff2",
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            AdapterTarget::Ff2 => ParamGroup::FeedForward,
            _ => ParamGroup::Attention,
        }
    }
}

/// Layer group used for per-group telemetry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Attention,
    FeedForward,
    Embedding,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Attention => "attention",
            ParamGroup::FeedForward => "feed_forward",
            ParamGroup::Embedding => "embedding",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ff_mult: usize,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<AdapterTarget>,
    /// Rotary frequency base.
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 2,
            blocks: 2,
            ff_mult: 2,
            rank: 4,
            alpha: 8.0,
            targets: AdapterTarget::ALL.to_vec(),
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn ff_hidden(&self) -> usize {
        self.dim * self.ff_mult
    }

    /// `(d_out, d_in)` of an adapted layer.
    pub fn layer_shape(&self, target: AdapterTarget) -> (usize, usize) {
        match target {
            AdapterTarget::Ff2 => (self.dim, self.ff_hidden()),
            _ => (self.dim, self.dim),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Domain(format!(
                "dim {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::Domain(format!(
                "head width {} is odd; rotary embeddings pair channels",
                self.head_dim()
            )));
        }
        if self.blocks == 0 || self.ff_mult == 0 {
            return Err(ModelError::Domain(
                "blocks and ff_mult must be positive".into(),
            ));
        }
        if self.rank == 0 || !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(ModelError::Domain("rank and alpha must be positive".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(ModelError::Domain("rope_base must exceed 1".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(ModelError::Domain("duplicate adapter target".into()));
        }
        for &t in &self.targets {
            let (d_out, d_in) = self.layer_shape(t);
            let limit = d_out.min(d_in);
            if self.rank > limit {
                return Err(ModelError::Rank {
                    layer: t.name().into(),
                    rank: self.rank,
                    limit,
                });
            }
        }
        Ok(())
    }

    /// Adapter targets in canonical order.
    fn ordered_targets(&self) -> Vec<AdapterTarget> {
        AdapterTarget::ALL
            .into_iter()
            .filter(|t| self.targets.contains(t))
            .collect()
    }
}

/// Frozen weights of one block. Matrices are `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1: Tensor,
    pub ff2: Tensor,
}

impl BlockWeights {
    pub fn weight(&self, target: AdapterTarget) -> &Tensor {
        match target {
            AdapterTarget::Q => &self.wq,
            AdapterTarget::K => &self.wk,
            AdapterTarget::V => &self.wv,
            AdapterTarget::O => &self.wo,
            AdapterTarget::Ff2 => &self.ff2,
        }
    }

    fn weight_mut(&mut self, target: AdapterTarget) -> &mut Tensor {
        match target {
            AdapterTarget::Q => &mut self.wq,
            AdapterTarget::K => &mut self.wk,
            AdapterTarget::V => &mut self.wv,
            AdapterTarget::O => &mut self.wo,
            AdapterTarget::Ff2 => &mut self.ff2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub w_in: Tensor,
    /// One row per [`TokenKind`].
    pub kind_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub w_out: Tensor,
}

/// What a trainable parameter is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    AdapterA { block: usize, target: AdapterTarget },
    AdapterB { block: usize, target: AdapterTarget },
    Cls,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainableEntry {
    pub id: ParamId,
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub group: ParamGroup,
}

impl TrainableEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether decoupled weight decay applies (adapter matrices only).
    pub fn decays(&self) -> bool {
        !matches!(self.role, ParamRole::Cls)
    }
}

/// Frozen base plus trainable adapters and `<CLS>` embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    config: ModelConfig,
    base: BaseWeights,
    trainable: Vec<Tensor>,
    index: Vec<TrainableEntry>,
}

/// Number of distinct [`TokenKind`]s.
const KINDS: usize = 4;

/// Builds base weights from `seed` (Gaussian, `1/√d_in` scale), adapters with
/// Gaussian `A` and zero `B`, and a zero `<CLS>` embedding.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<DenoiserParams, ModelError> {
    config.validate()?;
    let d = config.dim;
    let h = config.ff_hidden();
    let mut rng = RngStream::new(seed, streams::INIT);
    let mat = |rows: usize, cols: usize, rng: &mut RngStream| {
        Tensor::randn(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
    };
    let w_in = mat(d, d, &mut rng);
    let kind_embed = Tensor::randn(KINDS, d, 1.0, &mut rng);
    let blocks = (0..config.blocks)
        .map(|_| BlockWeights {
            wq: mat(d, d, &mut rng),
            wk: mat(d, d, &mut rng),
            wv: mat(d, d, &mut rng),
            wo: mat(d, d, &mut rng),
            ff1: mat(h, d, &mut rng),
            ff2: mat(d, h, &mut rng),
        })
        .collect();
    let w_out = mat(d, d, &mut rng);

    let mut adapter_rng = rng.child(1);
    let mut trainable = Vec::new();
    let mut index = Vec::new();
    let mut push = |name: String, tensor: Tensor, role: ParamRole, group: ParamGroup| {
        index.push(TrainableEntry {
            id: ParamId(trainable.len()),
            name,
            shape: tensor.shape().to_vec(),
            role,
            group,
        });
        trainable.push(tensor);
    };
    for block in 0..config.blocks {
        for target in config.ordered_targets() {
            let (d_out, d_in) = config.layer_shape(target);
            let r = config.rank;
            push(
                format!("blocks.{block}.{}.lora_a", target.name()),
                Tensor::randn(r, d_in, 1.0 / (d_in as f64).sqrt(), &mut adapter_rng),
                ParamRole::AdapterA { block, target },
                target.group(),
            );
            push(
                format!("blocks.{block}.{}.lora_b", target.name()),
                Tensor::zeros(&[d_out, r]),
                ParamRole::AdapterB { block, target },
                target.group(),
            );
        }
    }
    push(
        "cls".into(),
        Tensor::zeros(&[1, d]),
        ParamRole::Cls,
        ParamGroup::Embedding,
    );

    Ok(DenoiserParams {
        config: config.clone(),
        base: BaseWeights {
            w_in,
            kind_embed,
            blocks,
            w_out,
        },
        trainable,
        index,
    })
}

impl DenoiserParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    pub fn trainable(&self) -> &[Tensor] {
        &self.trainable
    }

    pub fn trainable_index(&self) -> &[TrainableEntry] {
        &self.index
    }

    pub fn trainable_len(&self) -> usize {
        self.index.iter().map(TrainableEntry::len).sum()
    }

    /// `α / r`.
    pub fn adapter_scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    /// Replaces every trainable tensor; shapes must match the index.
    pub fn set_trainable(&mut self, values: Vec<Tensor>) -> Result<(), ModelError> {
        if values.len() != self.index.len() {
            return Err(ModelError::Domain(format!(
                "{} trainable tensors for an index of {}",
                values.len(),
                self.index.len()
            )));
        }
        for (v, e) in values.iter().zip(&self.index) {
            if v.shape() != e.shape.as_slice() {
                return Err(ModelError::Domain(format!(
                    "{}: shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.shape
                )));
            }
        }
        self.trainable = values;
        Ok(())
    }

    /// `(A, B)` of an adapted layer, if any.
    pub fn adapter(&self, block: usize, target: AdapterTarget) -> Option<(&Tensor, &Tensor)> {
        let a = self
            .index
            .iter()
            .position(|e| e.role == ParamRole::AdapterA { block, target })?;
        let b = self
            .index
            .iter()
            .position(|e| e.role == ParamRole::AdapterB { block, target })?;
        Some((&self.trainable[a], &self.trainable[b]))
    }

    pub fn cls(&self) -> &Tensor {
        let i = self
            .index
            .iter()
            .position(|e| e.role == ParamRole::Cls)
            .expect("cls is always indexed");
        &self.trainable[i]
    }

    /// Effective weight `W + (α/r) B A` of an adapted layer, or the frozen
    /// weight when the layer has no adapter.
    pub fn effective_weight(
        &self,
        block: usize,
        target: AdapterTarget,
    ) -> Result<Tensor, ModelError> {
        let w = self.base.blocks[block].weight(target);
        match self.adapter(block, target) {
            Some((a, b)) => Ok(w.add(&b.matmul(a)?.scale(self.adapter_scale()))?),
            None => Ok(w.clone()),
        }
    }

    /// Copy with every adapter folded into its base weight and `B` zeroed.
    pub fn merged(&self) -> Result<DenoiserParams, ModelError> {
        let mut out = self.clone();
        for block in 0..self.config.blocks {
            for target in self.config.ordered_targets() {
                *out.base.blocks[block].weight_mut(target) =
                    self.effective_weight(block, target)?;
            }
        }
        for (t, e) in out.trainable.iter_mut().zip(&self.index) {
            if matches!(e.role, ParamRole::AdapterB { .. }) {
                *t = Tensor::zeros(t.shape());
            }
        }
        Ok(out)
    }

    /// SHA-256 of every frozen weight, in a fixed order.
    pub fn base_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        };
        feed(&self.base.w_in);
        feed(&self.base.kind_embed);
        for b in &self.base.blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1, &b.ff2] {
                feed(t);
            }
        }
        feed(&self.base.w_out);
        hex::encode(h.finalize())
    }

    /// SHA-256 of the trainable tensors in index order.
    pub fn trainable_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.trainable {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_b() {
        let cfg = ModelConfig::default();
        let a = init_model(&cfg, 3).unwrap();
        assert_eq!(a, init_model(&cfg, 3).unwrap());
        assert_ne!(
            a.base_fingerprint(),
            init_model(&cfg, 4).unwrap().base_fingerprint()
        );
        let (_, b) = a.adapter(0, AdapterTarget::Q).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.0));
        // 2 blocks x (4 attention x 2*4*16 + ff2 (4*32 + 16*4)) + cls
        assert_eq!(a.trainable_len(), 2 * (4 * 128 + 192) + 16);
    }

    #[test]
    fn rank_above_width_is_rejected() {
        let cfg = ModelConfig {
            rank: 128,
            alpha: 256.0,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::Rank { .. })));
    }

    #[test]
    fn index_order_is_stable() {
        let p = init_model(&ModelConfig::default(), 0).unwrap();
        let names: Vec<&str> = p
            .trainable_index()
            .iter()
            .take(3)
            .map(|e| e.name.as_str())
            .collect();
        assert_eq!(
            names,
            [
                "blocks.0.q.lora_a",
                "blocks.0.q.lora_b",
                "blocks.0.k.lora_a"
            ]
        );
        assert_eq!(p.trainable_index().last().unwrap().name, "cls");
        assert!(p
            .trainable_index()
            .iter()
            .enumerate()
            .all(|(i, e)| e.id == ParamId(i)));
    }
}
