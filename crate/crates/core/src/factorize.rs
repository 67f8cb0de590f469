//! Compressed key/value representations and their installation into a model.
//!
//! * RoPE-pair pruning keeps whole rotation pairs, so the key cache can stay
//!   rotated in the compressed basis; the binary expansion `B_k` is only an
//!   index and is absorbed into the query projection as a column gather.
//! * Truncated SVD (`W ≈ A·B`, `A = UΣ^½`, `B = Σ^½Vᵀ`) per kv head.
//!
//! Methods: `baseline` leaves the model untouched; `svd` caches both latents
//! and reconstructs keys and values every step; `palu` reconstructs keys and
//! folds `B_v` into the output projection; `rap` prunes key pairs and uses a
//! value SVD with `B_v` folded into the output projection.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::budget::BudgetPlan;
use crate::error::{invalid, Result};
use crate::numcore::Matrix;
use crate::rope::{PairingScheme, RetainedIndex};
use crate::scoring::{PairScoreTable, Side};
use crate::toymodel::{AttentionLayer, AttentionWeights, KeyProjection, LayerWeights, Model, ModelSpec, ValueProjection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Svd,
    Palu,
    #[serde(alias = "rap-hybrid")]
    Rap,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Svd, Method::Palu, Method::Rap];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Svd => "svd",
            Method::Palu => "palu",
            Method::Rap => "rap",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "svd" => Ok(Method::Svd),
            "palu" => Ok(Method::Palu),
            "rap" | "rap-hybrid" => Ok(Method::Rap),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Top-`m` pairs by score; ties keep the lower pair index. Returned sorted by pair.
pub fn select_pairs(scores: &[f64], m: usize, scheme: &PairingScheme) -> Result<RetainedIndex> {
    if scores.len() != scheme.num_pairs() {
        return Err(invalid(format!("{} scores for {} pairs", scores.len(), scheme.num_pairs())));
    }
    if m == 0 || m > scheme.num_pairs() {
        return Err(invalid(format!("cannot retain {m} of {} pairs", scheme.num_pairs())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..m].to_vec();
    keep.sort_unstable();
    RetainedIndex::new(keep, scheme)
}

fn head_columns(retained: &[RetainedIndex], head_dim: usize, heads: usize, group: usize) -> Vec<usize> {
    (0..heads)
        .flat_map(|h| retained[h / group].columns().iter().map(move |&c| h * head_dim + c))
        .collect()
}

/// `W_q B_kᵀ` for every query head, computed as a gather of the group's retained columns.
pub fn absorb_into_query(w_q: &Matrix, retained: &[RetainedIndex], spec: &ModelSpec) -> Result<Matrix> {
    if retained.len() != spec.kv_heads || w_q.cols() != spec.model_dim() {
        return Err(invalid("query absorption needs one index per kv head and a D̂-wide W_q"));
    }
    w_q.gather_cols(&head_columns(retained, spec.head_dim, spec.q_heads, spec.group_size()))
}

/// `A_k`: the retained columns of each kv head of `W_k`.
pub fn gather_key(w_k: &Matrix, retained: &[RetainedIndex], spec: &ModelSpec) -> Result<Matrix> {
    if retained.len() != spec.kv_heads {
        return Err(invalid("one retained index per kv head required"));
    }
    w_k.gather_cols(&head_columns(retained, spec.head_dim, spec.kv_heads, 1))
}

/// Copy of `w` with every column outside each head's retained set zeroed.
pub fn mask_columns(w: &Matrix, keep: &[RetainedIndex], head_dim: usize) -> Result<Matrix> {
    if w.cols() != keep.len() * head_dim {
        return Err(invalid("one retained index per head block required"));
    }
    let mut out = w.clone();
    for (h, k) in keep.iter().enumerate() {
        for c in (0..head_dim).filter(|c| k.columns().binary_search(c).is_err()) {
            for r in 0..out.rows() {
                out.set(r, h * head_dim + c, 0.0);
            }
        }
    }
    Ok(out)
}

/// Zeroes the columns of one layer's `W_k` or `W_v` outside each head's retained pairs.
pub fn mask_pairs(model: &Model, layer: usize, side: Side, keep: &[RetainedIndex]) -> Result<Model> {
    let spec = &model.spec;
    if keep.len() != spec.kv_heads {
        return Err(invalid("one retained index per kv head required"));
    }
    let mut out = model.clone();
    let target = match (side, out.layers.get_mut(layer)) {
        (Side::K, Some(AttentionLayer { key: KeyProjection::Dense { w_k, .. }, .. })) => w_k,
        (Side::V, Some(AttentionLayer { value: ValueProjection::Dense { w_v, .. }, .. })) => w_v,
        _ => return Err(invalid(format!("layer {layer} {side:?} is not a dense projection"))),
    };
    *target = mask_columns(target, keep, spec.head_dim)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RapLayer {
    pub retained: Vec<RetainedIndex>,
    /// `D̂ × H_kv·2m`
    pub a_k: Matrix,
    /// `D̂ × H_q·2m`
    pub w_q: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RapFactorization {
    pub layers: Vec<RapLayer>,
}

/// Keeps the highest-scoring key pairs of every kv head, `m` per the plan's K group of each layer.
pub fn rap_prune(
    weights: &AttentionWeights,
    scores: &PairScoreTable,
    plan: &BudgetPlan,
    spec: &ModelSpec,
) -> Result<RapFactorization> {
    let scheme = spec.scheme()?;
    if scores.head_dim != spec.head_dim || scores.pairing != spec.pairing {
        return Err(invalid("score table does not match the model's pairing"));
    }
    let layers = weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let group = scores
                .group(l, Side::K)
                .ok_or_else(|| invalid(format!("no key scores for layer {l}")))?;
            let m = plan
                .group(l, Side::K)
                .ok_or_else(|| invalid(format!("no key budget for layer {l}")))?
                .retained_pairs;
            if group.heads.len() != spec.kv_heads {
                return Err(invalid(format!("layer {l}: scores cover {} kv heads", group.heads.len())));
            }
            let retained = group
                .heads
                .iter()
                .map(|h| select_pairs(h, m, &scheme))
                .collect::<Result<Vec<_>>>()?;
            Ok(RapLayer {
                a_k: gather_key(&w.w_k, &retained, spec)?,
                w_q: absorb_into_query(&w.w_q, &retained, spec)?,
                retained,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RapFactorization { layers })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactorization {
    /// `rows × rank`
    pub a: Matrix,
    /// `rank × cols`
    pub b: Matrix,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
}

impl SvdFactorization {
    pub fn rank(&self) -> usize {
        self.b.rows()
    }

    /// Sum of squared discarded singular values.
    pub fn tail_energy(&self) -> f64 {
        self.singular_values[self.rank()..].iter().map(|s| s * s).sum()
    }
}

/// Truncated SVD with the singular values split evenly between the factors.
pub fn svd_factor(w: &Matrix, rank: usize) -> Result<SvdFactorization> {
    let full = w.rows().min(w.cols());
    if rank == 0 || rank > full {
        return Err(invalid(format!("rank {rank} outside 1..={full}")));
    }
    let svd = DMatrix::from_row_slice(w.rows(), w.cols(), w.data()).svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..full).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let a = Matrix::from_fn(w.rows(), rank, |r, k| u[(r, order[k])] * singular_values[k].sqrt());
    let b = Matrix::from_fn(rank, w.cols(), |k, c| singular_values[k].sqrt() * v_t[(order[k], c)]);
    Ok(SvdFactorization { a, b, singular_values })
}

/// Per-kv-head SVD of a `D̂ × H_kv·D` projection: concatenated `A` blocks and one `B` per head.
fn per_head_svd(w: &Matrix, spec: &ModelSpec, rank: usize) -> Result<(Matrix, Vec<Matrix>)> {
    let d = spec.head_dim;
    let mut a_blocks = Vec::with_capacity(spec.kv_heads);
    let mut bs = Vec::with_capacity(spec.kv_heads);
    for g in 0..spec.kv_heads {
        let f = svd_factor(&w.slice_cols(g * d, d)?, rank)?;
        a_blocks.push(f.a);
        bs.push(f.b);
    }
    let refs: Vec<&Matrix> = a_blocks.iter().collect();
    Ok((Matrix::concat_cols(&refs)?, bs))
}

/// `B_v` of head group `h / group` folded into the rows of `W_o` that belong to query head `h`.
fn absorb_into_output(w_o: &Matrix, b_v: &[Matrix], spec: &ModelSpec) -> Result<Matrix> {
    let d = spec.head_dim;
    let blocks = (0..spec.q_heads)
        .map(|h| b_v[h / spec.group_size()].matmul(&w_o.slice_rows(h * d, d)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::concat_rows(&refs)
}

fn expand_heads(a: &Matrix, bs: &[Matrix]) -> Result<Matrix> {
    let rank = bs[0].rows();
    let blocks = bs
        .iter()
        .enumerate()
        .map(|(g, b)| a.slice_cols(g * rank, rank)?.matmul(b))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::concat_cols(&refs)
}

/// `round((1 − ρ)·D)`, at least 1.
pub fn svd_rank(rho: f64, head_dim: usize) -> usize {
    (((1.0 - rho) * head_dim as f64).round() as usize).clamp(1, head_dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KeyManifest {
    Dense,
    Factored { rank: usize },
    Pruned { retained: Vec<Vec<usize>>, columns: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueManifest {
    Dense,
    Factored { rank: usize },
    Absorbed { rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub layer: usize,
    pub key: KeyManifest,
    pub value: ValueManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationManifest {
    pub method: Method,
    pub rho: f64,
    pub layers: Vec<LayerManifest>,
}

impl FactorizationManifest {
    pub fn describe(model: &Model, method: Method, rho: f64) -> Self {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(layer, l)| LayerManifest {
                layer,
                key: match &l.key {
                    KeyProjection::Dense { .. } => KeyManifest::Dense,
                    KeyProjection::Factored { b_k, .. } => KeyManifest::Factored { rank: b_k[0].rows() },
                    KeyProjection::Pruned { retained, .. } => KeyManifest::Pruned {
                        retained: retained.iter().map(|r| r.pairs().to_vec()).collect(),
                        columns: retained.iter().map(|r| r.columns().to_vec()).collect(),
                    },
                },
                value: match &l.value {
                    ValueProjection::Dense { .. } => ValueManifest::Dense,
                    ValueProjection::Factored { b_v, .. } => ValueManifest::Factored { rank: b_v[0].rows() },
                    ValueProjection::Absorbed { rank, .. } => ValueManifest::Absorbed { rank: *rank },
                },
            })
            .collect();
        Self { method, rho, layers }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub method: Method,
    pub rho: f64,
    pub model: Model,
    /// Dense weights equivalent to the installed factors (`A·B` expanded, pruned columns zeroed).
    pub reference: AttentionWeights,
}

impl CompressedModel {
    pub fn manifest(&self) -> FactorizationManifest {
        FactorizationManifest::describe(&self.model, self.method, self.rho)
    }

    /// Dense model running the expanded reference weights.
    pub fn reference_model(&self) -> Result<Model> {
        Model::from_weights(self.model.spec.clone(), self.model.embedding.clone(), self.reference.clone())
    }
}

/// Compresses a dense model. `rap` needs `scores` and a `plan`; `svd`/`palu` use rank `round((1−ρ)·D)`.
pub fn build_compressed(
    model: &Model,
    method: Method,
    rho: f64,
    scores: Option<&PairScoreTable>,
    plan: Option<&BudgetPlan>,
) -> Result<CompressedModel> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid(format!("compression ratio {rho} must lie in [0, 1)")));
    }
    let weights = model
        .dense_weights()
        .ok_or_else(|| invalid("compression starts from a dense model"))?;
    let spec = &model.spec;
    let mut layers = Vec::with_capacity(spec.layers);
    let mut reference = Vec::with_capacity(spec.layers);
    let rap = match method {
        Method::Rap => {
            let scores = scores.ok_or_else(|| invalid("rap needs pair scores"))?;
            let plan = plan.ok_or_else(|| invalid("rap needs a budget plan"))?;
            Some((rap_prune(&weights, scores, plan, spec)?, plan))
        }
        _ => None,
    };
    for (l, w) in weights.layers.iter().enumerate() {
        let (layer, refw) = match method {
            Method::Baseline => (
                AttentionLayer {
                    key: KeyProjection::Dense { w_q: w.w_q.clone(), w_k: w.w_k.clone() },
                    value: ValueProjection::Dense { w_v: w.w_v.clone(), w_o: w.w_o.clone() },
                },
                w.clone(),
            ),
            Method::Svd | Method::Palu => {
                let rank = svd_rank(rho, spec.head_dim);
                let (a_k, b_k) = per_head_svd(&w.w_k, spec, rank)?;
                let (a_v, b_v) = per_head_svd(&w.w_v, spec, rank)?;
                let refw = LayerWeights {
                    w_q: w.w_q.clone(),
                    w_k: expand_heads(&a_k, &b_k)?,
                    w_v: expand_heads(&a_v, &b_v)?,
                    w_o: w.w_o.clone(),
                };
                let value = if method == Method::Svd {
                    ValueProjection::Factored { a_v, b_v, w_o: w.w_o.clone() }
                } else {
                    ValueProjection::Absorbed { w_o: absorb_into_output(&w.w_o, &b_v, spec)?, a_v, rank }
                };
                (AttentionLayer { key: KeyProjection::Factored { w_q: w.w_q.clone(), a_k, b_k }, value }, refw)
            }
            Method::Rap => {
                let (fact, plan) = rap.as_ref().expect("built above");
                let rl = &fact.layers[l];
                let m_v = plan
                    .group(l, Side::V)
                    .ok_or_else(|| invalid(format!("no value budget for layer {l}")))?
                    .retained_pairs;
                let rank = 2 * m_v;
                let (a_v, b_v) = per_head_svd(&w.w_v, spec, rank)?;
                let w_k_masked = mask_columns(&w.w_k, &rl.retained, spec.head_dim)?;
                let refw = LayerWeights {
                    w_q: w.w_q.clone(),
                    w_k: w_k_masked,
                    w_v: expand_heads(&a_v, &b_v)?,
                    w_o: w.w_o.clone(),
                };
                let layer = AttentionLayer {
                    key: KeyProjection::Pruned { w_q: rl.w_q.clone(), a_k: rl.a_k.clone(), retained: rl.retained.clone() },
                    value: ValueProjection::Absorbed { w_o: absorb_into_output(&w.w_o, &b_v, spec)?, a_v, rank },
                };
                (layer, refw)
            }
        };
        layers.push(layer);
        reference.push(refw);
    }
    let out = Model { spec: spec.clone(), embedding: model.embedding.clone(), layers };
    out.validate()?;
    Ok(CompressedModel { method, rho, model: out, reference: AttentionWeights { layers: reference } })
}
