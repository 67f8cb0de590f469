use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{FlopTag, Matrix, Tape, Var};
use crate::rope::{multi_head_layout, RotaryTable};
use crate::toymodel::{AttentionLayer, KeyProjection, Model, ValueProjection};

/// Identifies a weight matrix inside a [`Model`] for [`WeightSource`] hooks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    Embedding,
    Query(usize),
    Key(usize),
    Value(usize),
    Output(usize),
    KeyBasis { layer: usize, head: usize },
    ValueBasis { layer: usize, head: usize },
}

/// Decides how weights enter the tape: as constants, as differentiable leaves,
/// or with an additive adapter branch on the projection output.
pub trait WeightSource {
    fn weight(&mut self, tape: &mut Tape, _slot: Slot, w: &Matrix) -> Result<Var> {
        Ok(tape.constant(w.clone()))
    }

    /// Called with the projection input `x` and output `y = x·W`; returns the (possibly adapted) output.
    fn adapt(&mut self, _tape: &mut Tape, _slot: Slot, _x: Var, y: Var) -> Result<Var> {
        Ok(y)
    }
}

/// Every weight is a constant.
#[derive(Clone, Copy, Debug, Default)]
pub struct Frozen;

impl WeightSource for Frozen {}

/// Registers the selected weights as differentiable leaves; everything else is constant.
#[derive(Clone, Debug, Default)]
pub struct Leaves {
    targets: Vec<Slot>,
    vars: Vec<(Slot, Var)>,
}

impl Leaves {
    pub fn new(targets: Vec<Slot>) -> Self {
        Self { targets, vars: Vec::new() }
    }

    pub fn var(&self, slot: Slot) -> Option<Var> {
        self.vars.iter().find(|(s, _)| *s == slot).map(|&(_, v)| v)
    }
}

impl WeightSource for Leaves {
    fn weight(&mut self, tape: &mut Tape, slot: Slot, w: &Matrix) -> Result<Var> {
        if !self.targets.contains(&slot) {
            return Ok(tape.constant(w.clone()));
        }
        // The embedding feeds both the input gather and the tied head; reuse its leaf.
        if let Some(v) = self.var(slot) {
            return Ok(v);
        }
        let v = tape.leaf(w.clone());
        self.vars.push((slot, v));
        Ok(v)
    }
}

/// Per-layer key and value stores; row `i` belongs to absolute position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// `S × H_kv·d_k`
    pub keys: Matrix,
    /// `S × H_kv·d_v`
    pub values: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(model: &Model) -> Self {
        let s = &model.spec;
        let layers = model
            .layers
            .iter()
            .map(|l| LayerCache {
                keys: Matrix::zeros(0, s.kv_heads * l.key.cache_width(s.head_dim)),
                values: Matrix::zeros(0, s.kv_heads * l.value.cache_width(s.head_dim)),
            })
            .collect();
        Self { layers }
    }

    /// Cached sequence length.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored scalars across all layers, keys and values.
    pub fn entries(&self) -> usize {
        self.layers.iter().map(|l| l.keys.len() + l.values.len()).sum()
    }

    pub fn check(&self, model: &Model) -> Result<()> {
        let s = &model.spec;
        if self.layers.len() != model.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "{} cached layers for {} model layers",
                self.layers.len(),
                model.layers.len()
            )));
        }
        let len = self.len();
        for (i, (c, l)) in self.layers.iter().zip(&model.layers).enumerate() {
            let kw = s.kv_heads * l.key.cache_width(s.head_dim);
            let vw = s.kv_heads * l.value.cache_width(s.head_dim);
            if c.keys.cols() != kw || c.values.cols() != vw || c.keys.rows() != len || c.values.rows() != len {
                return Err(Error::CacheMismatch(format!("layer {i} cache dims do not match the model")));
            }
        }
        Ok(())
    }
}

fn project(
    tape: &mut Tape,
    src: &mut dyn WeightSource,
    slot: Slot,
    x: Var,
    w: &Matrix,
    tag: FlopTag,
) -> Result<Var> {
    let wv = src.weight(tape, slot, w)?;
    let y = tape.matmul(x, wv, tag)?;
    src.adapt(tape, slot, x, y)
}

/// Appends `new` rows to the cached block and returns the full sequence on the tape.
fn extend(tape: &mut Tape, cached: &mut Matrix, new: Var) -> Result<Var> {
    let all = if cached.rows() == 0 {
        new
    } else {
        let old = tape.constant(cached.clone());
        tape.concat_rows(&[old, new])?
    };
    *cached = Matrix::concat_rows(&[cached, tape.value(new)])?;
    Ok(all)
}

fn head_slices(tape: &mut Tape, x: Var, heads: usize, width: usize) -> Result<Vec<Var>> {
    (0..heads).map(|h| tape.slice_cols(x, h * width, width)).collect()
}

struct Pass<'a> {
    model: &'a Model,
    table: RotaryTable,
    /// Absolute positions of the new rows.
    positions: Vec<usize>,
    offset: usize,
}

impl Pass<'_> {
    fn rotate(&self, tape: &mut Tape, x: Var, layout: &[(usize, usize, usize)], positions: &[usize]) -> Result<Var> {
        let rot = self.table.rotation(layout, positions)?;
        tape.rotate(x, Arc::new(rot))
    }

    fn layer(
        &self,
        tape: &mut Tape,
        src: &mut dyn WeightSource,
        idx: usize,
        layer: &AttentionLayer,
        cache: &mut crate::toymodel::LayerCache,
        x: Var,
    ) -> Result<Var> {
        let s = &self.model.spec;
        let d = s.head_dim;
        let scheme = s.scheme()?;
        let full_layout = scheme.layout();
        let group = s.group_size();

        // Queries and per-kv-head keys over the whole visible sequence.
        let (queries, q_width, keys) = match &layer.key {
            KeyProjection::Dense { w_q, w_k } => {
                let q = project(tape, src, Slot::Query(idx), x, w_q, FlopTag::QueryProjection)?;
                let q = self.rotate(tape, q, &multi_head_layout(&vec![full_layout.clone(); s.q_heads], d), &self.positions)?;
                let k = project(tape, src, Slot::Key(idx), x, w_k, FlopTag::KeyProjection)?;
                let k = self.rotate(tape, k, &multi_head_layout(&vec![full_layout.clone(); s.kv_heads], d), &self.positions)?;
                let k_all = extend(tape, &mut cache.keys, k)?;
                (q, d, head_slices(tape, k_all, s.kv_heads, d)?)
            }
            KeyProjection::Factored { w_q, a_k, b_k } => {
                let q = project(tape, src, Slot::Query(idx), x, w_q, FlopTag::QueryProjection)?;
                let q = self.rotate(tape, q, &multi_head_layout(&vec![full_layout.clone(); s.q_heads], d), &self.positions)?;
                let rank = b_k[0].rows();
                let lat = project(tape, src, Slot::Key(idx), x, a_k, FlopTag::KeyProjection)?;
                let lat_all = extend(tape, &mut cache.keys, lat)?;
                let all_positions: Vec<usize> = (0..cache.keys.rows()).collect();
                let mut keys = Vec::with_capacity(s.kv_heads);
                for (g, lat_g) in head_slices(tape, lat_all, s.kv_heads, rank)?.into_iter().enumerate() {
                    let b = src.weight(tape, Slot::KeyBasis { layer: idx, head: g }, &b_k[g])?;
                    let full = tape.matmul(lat_g, b, FlopTag::KeyReconstruction)?;
                    keys.push(self.rotate(tape, full, &full_layout, &all_positions)?);
                }
                (q, d, keys)
            }
            KeyProjection::Pruned { w_q, a_k, retained } => {
                let width = retained[0].width();
                let q_layouts: Vec<_> = (0..s.q_heads).map(|h| retained[h / group].layout(&scheme)).collect();
                let k_layouts: Vec<_> = retained.iter().map(|r| r.layout(&scheme)).collect();
                let q = project(tape, src, Slot::Query(idx), x, w_q, FlopTag::QueryProjection)?;
                let q = self.rotate(tape, q, &multi_head_layout(&q_layouts, width), &self.positions)?;
                let k = project(tape, src, Slot::Key(idx), x, a_k, FlopTag::KeyProjection)?;
                let k = self.rotate(tape, k, &multi_head_layout(&k_layouts, width), &self.positions)?;
                let k_all = extend(tape, &mut cache.keys, k)?;
                (q, width, head_slices(tape, k_all, s.kv_heads, width)?)
            }
        };

        let values = match &layer.value {
            ValueProjection::Dense { w_v, .. } => {
                let v = project(tape, src, Slot::Value(idx), x, w_v, FlopTag::ValueProjection)?;
                let v_all = extend(tape, &mut cache.values, v)?;
                head_slices(tape, v_all, s.kv_heads, d)?
            }
            ValueProjection::Factored { a_v, b_v, .. } => {
                let rank = b_v[0].rows();
                let lat = project(tape, src, Slot::Value(idx), x, a_v, FlopTag::ValueProjection)?;
                let lat_all = extend(tape, &mut cache.values, lat)?;
                let mut values = Vec::with_capacity(s.kv_heads);
                for (g, lat_g) in head_slices(tape, lat_all, s.kv_heads, rank)?.into_iter().enumerate() {
                    let b = src.weight(tape, Slot::ValueBasis { layer: idx, head: g }, &b_v[g])?;
                    values.push(tape.matmul(lat_g, b, FlopTag::ValueReconstruction)?);
                }
                values
            }
            ValueProjection::Absorbed { a_v, rank, .. } => {
                let lat = project(tape, src, Slot::Value(idx), x, a_v, FlopTag::ValueProjection)?;
                let lat_all = extend(tape, &mut cache.values, lat)?;
                head_slices(tape, lat_all, s.kv_heads, *rank)?
            }
        };

        // Scaling keeps the original head dim regardless of pruning.
        let scale = 1.0 / (d as f64).sqrt();
        let mut mixed = Vec::with_capacity(s.q_heads);
        for h in 0..s.q_heads {
            let g = h / group;
            let q_h = tape.slice_cols(queries, h * q_width, q_width)?;
            let scores = tape.matmul_t(q_h, keys[g], FlopTag::Scores)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.causal_softmax(scores, self.offset)?;
            mixed.push(tape.matmul(probs, values[g], FlopTag::ValueMix)?);
        }
        let concat = tape.concat_cols(&mixed)?;
        project(tape, src, Slot::Output(idx), concat, layer.value.output_matrix(), FlopTag::OutputProjection)
    }
}

/// Runs `tokens` through the model, appending to `cache`, and returns the logits variable.
pub fn forward(
    model: &Model,
    cache: &mut KvCache,
    tokens: &[usize],
    tape: &mut Tape,
    src: &mut dyn WeightSource,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(invalid("empty token sequence"));
    }
    let vocab = model.spec.vocab;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfVocab { token: bad, vocab });
    }
    cache.check(model)?;
    let offset = cache.len();
    let pass = Pass {
        model,
        table: RotaryTable::new(&model.spec.rope()?),
        positions: (offset..offset + tokens.len()).collect(),
        offset,
    };
    let emb = src.weight(tape, Slot::Embedding, &model.embedding)?;
    let mut x = tape.gather_rows(emb, tokens.to_vec())?;
    for (idx, (layer, lc)) in model.layers.iter().zip(cache.layers.iter_mut()).enumerate() {
        x = pass.layer(tape, src, idx, layer, lc, x)?;
    }
    tape.matmul_t(x, emb, FlopTag::Head)
}

/// Processes a whole sequence from an empty cache.
pub fn forward_prefill(model: &Model, tokens: &[usize]) -> Result<(Matrix, KvCache, Tape)> {
    let mut cache = KvCache::new(model);
    let mut tape = Tape::new();
    let out = forward(model, &mut cache, tokens, &mut tape, &mut Frozen)?;
    Ok((tape.value(out).clone(), cache, tape))
}

/// One autoregressive step; returns the `1 × vocab` logits of `token`.
pub fn forward_decode(model: &Model, cache: &mut KvCache, token: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let out = forward(model, cache, &[token], &mut tape, &mut Frozen)?;
    Ok(tape.value(out).clone())
}

pub fn logits(model: &Model, tokens: &[usize]) -> Result<Matrix> {
    Ok(forward_prefill(model, tokens)?.0)
}

/// Mean next-token cross-entropy recorded on `tape`.
pub fn loss_ce_on_tape(
    model: &Model,
    tokens: &[usize],
    tape: &mut Tape,
    src: &mut dyn WeightSource,
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(invalid("cross-entropy needs at least two tokens"));
    }
    let mut cache = KvCache::new(model);
    let logits = forward(model, &mut cache, &tokens[..tokens.len() - 1], tape, src)?;
    tape.cross_entropy(logits, tokens[1..].to_vec())
}

pub fn loss_ce(model: &Model, tokens: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_ce_on_tape(model, tokens, &mut tape, &mut Frozen)?;
    Ok(tape.scalar(loss))
}

/// Mean of per-window cross-entropies.
pub fn mean_loss(model: &Model, windows: &[Vec<usize>]) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("no windows to evaluate"));
    }
    let losses = windows
        .par_iter()
        .map(|w| loss_ce(model, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
