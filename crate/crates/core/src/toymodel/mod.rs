//! Deterministic toy decoder: token embedding, a stack of grouped-query
//! attention layers with RoPE, and an output head tied to the embedding.
//!
//! Each layer stores its projections in one of several representations so the
//! same forward pass serves the dense baseline and every compressed variant:
//!
//! | key side     | cached per kv head        | query width |
//! |--------------|---------------------------|-------------|
//! | `Dense`      | `RoPE(X W_k)`, `D` cols   | `D`         |
//! | `Factored`   | `X A_k`, rank cols        | `D`         |
//! | `Pruned`     | `RoPE(X A_k)`, `2m` cols  | `2m`        |
//!
//! Value side: `Dense` caches `X W_v`; `Factored` caches `X A_v` and
//! reconstructs with `B_v` each step; `Absorbed` caches `X A_v` and folds `B_v`
//! into the output projection.

mod calib;
mod checkpoint;
mod forward;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Matrix;
use crate::rope::{PairingKind, PairingScheme, RetainedIndex, RopeConfig};

pub use calib::{CalibrationSet, MarkovLanguage};
pub use train::{base_model, pretrain, PretrainConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointHeader, KeyLayout, LayerLayout, TensorEntry, ValueLayout,
};
pub use forward::{
    forward, forward_decode, forward_prefill, logits, loss_ce, loss_ce_on_tape, mean_loss, Frozen, KvCache,
    LayerCache, Leaves, Slot, WeightSource,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub layers: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub pairing: PairingKind,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            q_heads: 4,
            kv_heads: 2,
            head_dim: 8,
            vocab: 64,
            rope_base: 10000.0,
            pairing: PairingKind::HalfSplit,
            seed: 42,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.q_heads == 0 || self.kv_heads == 0 || self.vocab == 0 {
            return Err(invalid("layers, heads and vocab must be positive"));
        }
        if self.q_heads % self.kv_heads != 0 {
            return Err(invalid(format!(
                "{} query heads not divisible by {} kv heads",
                self.q_heads, self.kv_heads
            )));
        }
        self.rope()?;
        Ok(())
    }

    /// `D̂ = H_q · D`
    pub fn model_dim(&self) -> usize {
        self.q_heads * self.head_dim
    }

    /// Query heads sharing one kv head.
    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    pub fn scheme(&self) -> Result<PairingScheme> {
        PairingScheme::new(self.pairing, self.head_dim)
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.rope_base, self.scheme()?)
    }
}

/// Plain per-layer projection weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// `D̂ × D̂`
    pub w_q: Matrix,
    /// `D̂ × H_kv·D`
    pub w_k: Matrix,
    /// `D̂ × H_kv·D`
    pub w_v: Matrix,
    /// `D̂ × D̂`
    pub w_o: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub layers: Vec<LayerWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum KeyProjection {
    Dense { w_q: Matrix, w_k: Matrix },
    /// `a_k`: `D̂ × H_kv·rank`; `b_k[g]`: `rank × D`.
    Factored { w_q: Matrix, a_k: Matrix, b_k: Vec<Matrix> },
    /// `w_q`: absorbed `D̂ × H_q·2m`; `a_k`: `D̂ × H_kv·2m`; one index per kv head.
    Pruned { w_q: Matrix, a_k: Matrix, retained: Vec<RetainedIndex> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueProjection {
    Dense { w_v: Matrix, w_o: Matrix },
    /// `a_v`: `D̂ × H_kv·rank`; `b_v[g]`: `rank × D`; `w_o`: `D̂ × D̂`.
    Factored { a_v: Matrix, b_v: Vec<Matrix>, w_o: Matrix },
    /// `a_v`: `D̂ × H_kv·rank`; `w_o`: `H_q·rank × D̂` with `B_v` folded in.
    Absorbed { a_v: Matrix, w_o: Matrix, rank: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub key: KeyProjection,
    pub value: ValueProjection,
}

impl KeyProjection {
    /// Width of one query head after projection.
    pub fn query_width(&self, head_dim: usize) -> usize {
        match self {
            KeyProjection::Dense { .. } | KeyProjection::Factored { .. } => head_dim,
            KeyProjection::Pruned { retained, .. } => retained[0].width(),
        }
    }

    /// Cached columns per kv head.
    pub fn cache_width(&self, head_dim: usize) -> usize {
        match self {
            KeyProjection::Dense { .. } => head_dim,
            KeyProjection::Factored { b_k, .. } => b_k[0].rows(),
            KeyProjection::Pruned { retained, .. } => retained[0].width(),
        }
    }

    pub fn query_matrix(&self) -> &Matrix {
        match self {
            KeyProjection::Dense { w_q, .. }
            | KeyProjection::Factored { w_q, .. }
            | KeyProjection::Pruned { w_q, .. } => w_q,
        }
    }

    pub fn key_matrix(&self) -> &Matrix {
        match self {
            KeyProjection::Dense { w_k, .. } => w_k,
            KeyProjection::Factored { a_k, .. } | KeyProjection::Pruned { a_k, .. } => a_k,
        }
    }

    pub(crate) fn matrices_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        match self {
            KeyProjection::Dense { w_q, w_k } => (w_q, w_k),
            KeyProjection::Factored { w_q, a_k, .. } | KeyProjection::Pruned { w_q, a_k, .. } => (w_q, a_k),
        }
    }

    /// Stored parameters; the pruned index form counts as zero.
    pub fn parameter_count(&self) -> usize {
        match self {
            KeyProjection::Dense { w_q, w_k } => w_q.len() + w_k.len(),
            KeyProjection::Factored { w_q, a_k, b_k } => {
                w_q.len() + a_k.len() + b_k.iter().map(Matrix::len).sum::<usize>()
            }
            KeyProjection::Pruned { w_q, a_k, .. } => w_q.len() + a_k.len(),
        }
    }

    /// Parameters needed to produce cached keys (`W_k`, or `A_k` plus any `B_k`).
    pub fn kv_parameter_count(&self) -> usize {
        match self {
            KeyProjection::Dense { w_k, .. } => w_k.len(),
            KeyProjection::Factored { a_k, b_k, .. } => a_k.len() + b_k.iter().map(Matrix::len).sum::<usize>(),
            KeyProjection::Pruned { a_k, .. } => a_k.len(),
        }
    }
}

impl ValueProjection {
    /// Cached columns per kv head.
    pub fn cache_width(&self, head_dim: usize) -> usize {
        match self {
            ValueProjection::Dense { .. } => head_dim,
            ValueProjection::Factored { b_v, .. } => b_v[0].rows(),
            ValueProjection::Absorbed { rank, .. } => *rank,
        }
    }

    /// Width of one head's attention output entering the output projection.
    pub fn mix_width(&self, head_dim: usize) -> usize {
        match self {
            ValueProjection::Dense { .. } | ValueProjection::Factored { .. } => head_dim,
            ValueProjection::Absorbed { rank, .. } => *rank,
        }
    }

    pub fn value_matrix(&self) -> &Matrix {
        match self {
            ValueProjection::Dense { w_v, .. } => w_v,
            ValueProjection::Factored { a_v, .. } | ValueProjection::Absorbed { a_v, .. } => a_v,
        }
    }

    pub fn output_matrix(&self) -> &Matrix {
        match self {
            ValueProjection::Dense { w_o, .. }
            | ValueProjection::Factored { w_o, .. }
            | ValueProjection::Absorbed { w_o, .. } => w_o,
        }
    }

    pub(crate) fn matrices_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        match self {
            ValueProjection::Dense { w_v, w_o } => (w_v, w_o),
            ValueProjection::Factored { a_v, w_o, .. } | ValueProjection::Absorbed { a_v, w_o, .. } => (a_v, w_o),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            ValueProjection::Dense { w_v, w_o } => w_v.len() + w_o.len(),
            ValueProjection::Factored { a_v, b_v, w_o } => {
                a_v.len() + w_o.len() + b_v.iter().map(Matrix::len).sum::<usize>()
            }
            ValueProjection::Absorbed { a_v, w_o, .. } => a_v.len() + w_o.len(),
        }
    }

    pub fn kv_parameter_count(&self) -> usize {
        match self {
            ValueProjection::Dense { w_v, .. } => w_v.len(),
            ValueProjection::Factored { a_v, b_v, .. } => a_v.len() + b_v.iter().map(Matrix::len).sum::<usize>(),
            ValueProjection::Absorbed { a_v, .. } => a_v.len(),
        }
    }
}

impl AttentionLayer {
    pub fn parameter_count(&self) -> usize {
        self.key.parameter_count() + self.value.parameter_count()
    }
}

/// Embedding (`vocab × D̂`, also the output head) plus attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub embedding: Matrix,
    pub layers: Vec<AttentionLayer>,
}

impl Model {
    /// Random dense model seeded by `spec.seed`.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d_model = spec.model_dim();
        let kv_width = spec.kv_heads * spec.head_dim;
        let std = 1.0 / (d_model as f64).sqrt();
        let embedding = Matrix::random_normal(spec.vocab, d_model, 1.0, &mut rng);
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                w_q: Matrix::random_normal(d_model, d_model, std, &mut rng),
                w_k: Matrix::random_normal(d_model, kv_width, std, &mut rng),
                w_v: Matrix::random_normal(d_model, kv_width, std, &mut rng),
                w_o: Matrix::random_normal(d_model, d_model, std, &mut rng),
            })
            .collect();
        Self::from_weights(spec.clone(), embedding, AttentionWeights { layers })
    }

    pub fn from_weights(spec: ModelSpec, embedding: Matrix, weights: AttentionWeights) -> Result<Self> {
        spec.validate()?;
        let d_model = spec.model_dim();
        let kv_width = spec.kv_heads * spec.head_dim;
        if embedding.shape() != (spec.vocab, d_model) {
            return Err(invalid("embedding must be vocab x model_dim"));
        }
        if weights.layers.len() != spec.layers {
            return Err(invalid("layer count does not match spec"));
        }
        let layers = weights
            .layers
            .into_iter()
            .map(|w| {
                if w.w_q.shape() != (d_model, d_model)
                    || w.w_k.shape() != (d_model, kv_width)
                    || w.w_v.shape() != (d_model, kv_width)
                    || w.w_o.shape() != (d_model, d_model)
                {
                    return Err(invalid("projection shapes do not match spec"));
                }
                Ok(AttentionLayer {
                    key: KeyProjection::Dense { w_q: w.w_q, w_k: w.w_k },
                    value: ValueProjection::Dense { w_v: w.w_v, w_o: w.w_o },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, embedding, layers })
    }

    /// Plain weights when every layer is dense.
    pub fn dense_weights(&self) -> Option<AttentionWeights> {
        let layers = self
            .layers
            .iter()
            .map(|l| match (&l.key, &l.value) {
                (KeyProjection::Dense { w_q, w_k }, ValueProjection::Dense { w_v, w_o }) => Some(LayerWeights {
                    w_q: w_q.clone(),
                    w_k: w_k.clone(),
                    w_v: w_v.clone(),
                    w_o: w_o.clone(),
                }),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(AttentionWeights { layers })
    }

    pub fn is_dense(&self) -> bool {
        self.dense_weights().is_some()
    }

    pub fn attention_parameter_count(&self) -> usize {
        self.layers.iter().map(AttentionLayer::parameter_count).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.embedding.len() + self.attention_parameter_count()
    }

    /// Structural consistency of every layer with the spec.
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        s.validate()?;
        let d_model = s.model_dim();
        if self.embedding.shape() != (s.vocab, d_model) || self.layers.len() != s.layers {
            return Err(invalid("embedding or layer count inconsistent with spec"));
        }
        let scheme = s.scheme()?;
        for (l, layer) in self.layers.iter().enumerate() {
            let err = |what: &str| invalid(format!("layer {l}: {what}"));
            let qw = layer.key.query_width(s.head_dim);
            let kw = layer.key.cache_width(s.head_dim);
            if layer.key.query_matrix().shape() != (d_model, s.q_heads * qw) {
                return Err(err("query projection shape"));
            }
            if layer.key.key_matrix().shape() != (d_model, s.kv_heads * kw) {
                return Err(err("key projection shape"));
            }
            match &layer.key {
                KeyProjection::Dense { .. } => {}
                KeyProjection::Factored { b_k, .. } => {
                    if b_k.len() != s.kv_heads || b_k.iter().any(|b| b.shape() != (kw, s.head_dim)) {
                        return Err(err("key reconstruction shapes"));
                    }
                }
                KeyProjection::Pruned { retained, .. } => {
                    if retained.len() != s.kv_heads || retained.iter().any(|r| r.width() != kw) {
                        return Err(err("retained pairs must be uniform across kv heads"));
                    }
                    for r in retained {
                        RetainedIndex::new(r.pairs().to_vec(), &scheme)?;
                    }
                }
            }
            let vw = layer.value.cache_width(s.head_dim);
            let mw = layer.value.mix_width(s.head_dim);
            if layer.value.value_matrix().shape() != (d_model, s.kv_heads * vw) {
                return Err(err("value projection shape"));
            }
            if layer.value.output_matrix().shape() != (s.q_heads * mw, d_model) {
                return Err(err("output projection shape"));
            }
            if let ValueProjection::Factored { b_v, .. } = &layer.value {
                if b_v.len() != s.kv_heads || b_v.iter().any(|b| b.shape() != (vw, s.head_dim)) {
                    return Err(err("value reconstruction shapes"));
                }
            }
        }
        Ok(())
    }
}
