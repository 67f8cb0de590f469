//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Matrix products are
//! tallied in a [`FlopCounter`] by [`FlopTag`] as they are recorded.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::matrix::{log_sum_exp, softmax_in_place};
use crate::numcore::{Matrix, PairRotation};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a matrix product inside the attention model, used to split FLOP totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlopTag {
    QueryProjection,
    KeyProjection,
    ValueProjection,
    KeyReconstruction,
    ValueReconstruction,
    Scores,
    ValueMix,
    OutputProjection,
    Head,
    Adapter,
    Other,
}

impl FlopTag {
    /// Work needed to produce the cached K/V states.
    pub fn is_kv_projection(self) -> bool {
        matches!(
            self,
            FlopTag::KeyProjection
                | FlopTag::ValueProjection
                | FlopTag::KeyReconstruction
                | FlopTag::ValueReconstruction
        )
    }

    /// Everything inside the attention blocks (projections, scores, value mixing).
    pub fn is_attention_block(self) -> bool {
        !matches!(self, FlopTag::Head | FlopTag::Adapter | FlopTag::Other)
    }
}

/// Matmul FLOPs (`2·M·N·K` per product) grouped by tag.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    by_tag: BTreeMap<FlopTag, u64>,
}

impl FlopCounter {
    pub fn record(&mut self, tag: FlopTag, m: usize, n: usize, k: usize) {
        *self.by_tag.entry(tag).or_default() += 2 * (m * n * k) as u64;
    }

    pub fn get(&self, tag: FlopTag) -> u64 {
        self.by_tag.get(&tag).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.by_tag.values().sum()
    }

    pub fn kv_projection(&self) -> u64 {
        self.sum_where(FlopTag::is_kv_projection)
    }

    pub fn attention_block(&self) -> u64 {
        self.sum_where(FlopTag::is_attention_block)
    }

    pub fn sum_where(&self, pred: impl Fn(FlopTag) -> bool) -> u64 {
        self.by_tag.iter().filter(|(t, _)| pred(**t)).map(|(_, v)| v).sum()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (tag, v) in &other.by_tag {
            *self.by_tag.entry(*tag).or_default() += v;
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    RowSoftmax(Var),
    /// Row softmax where row `i` only sees columns `j <= offset + i`.
    CausalSoftmax(Var),
    Rotate(Var, Arc<PairRotation>),
    GatherCols(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Mean next-token cross-entropy against integer targets.
    CrossEntropy(Var, Arc<[usize]>),
    /// Mean over rows of `−Σ p·log softmax(logits)` against fixed distributions.
    SoftCrossEntropy(Var, Arc<Matrix>),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Single-writer record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: FlopCounter,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    leaves: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to a leaf; a zero matrix when the output does not depend on it.
    pub fn wrt(&self, leaf: Var) -> Result<Matrix> {
        let idx = leaf.0;
        if idx >= self.leaves.len() {
            return Err(Error::UnknownVariable(idx));
        }
        if !self.leaves[idx] {
            return Err(Error::NotALeaf(idx));
        }
        let (r, c) = self.shapes[idx];
        Ok(self.grads[idx].clone().unwrap_or_else(|| Matrix::zeros(r, c)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVariable(v.0))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Matrix> {
        Ok(&self.node(v)?.value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input treated as a constant by `backward`.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes.get(v.0), Some(Node { op: Op::Leaf, .. }))
    }

    pub fn matmul(&mut self, a: Var, b: Var, tag: FlopTag) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = va.matmul(vb)?;
        self.flops.record(tag, va.rows(), vb.cols(), va.cols());
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var, tag: FlopTag) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = va.matmul_transposed(vb)?;
        self.flops.record(tag, va.rows(), vb.rows(), va.cols());
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.node(a)?.value.add(&self.node(b)?.value)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.node(a)?.value.scale(s);
        Ok(self.push(out, Op::Scale(a, s)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.node(a)?.value.hadamard(&self.node(b)?.value)?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.node(a)?.value.row_softmax();
        Ok(self.push(out, Op::RowSoftmax(a)))
    }

    /// Softmax with an additive `−∞` mask on columns `j > offset + i`.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let mut out = self.node(a)?.value.clone();
        for r in 0..out.rows() {
            let visible = (offset + r + 1).min(out.cols());
            let row = out.row_mut(r);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.push(out, Op::CausalSoftmax(a)))
    }

    pub fn rotate(&mut self, a: Var, rotation: Arc<PairRotation>) -> Result<Var> {
        let out = rotation.apply(&self.node(a)?.value, false)?;
        Ok(self.push(out, Op::Rotate(a, rotation)))
    }

    pub fn gather_cols(&mut self, a: Var, cols: impl Into<Arc<[usize]>>) -> Result<Var> {
        let cols = cols.into();
        let out = self.node(a)?.value.gather_cols(&cols)?;
        Ok(self.push(out, Op::GatherCols(a, cols)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let cols: Vec<usize> = (start..start + len).collect();
        self.gather_cols(a, cols)
    }

    pub fn gather_rows(&mut self, a: Var, rows: impl Into<Arc<[usize]>>) -> Result<Var> {
        let rows = rows.into();
        let out = self.node(a)?.value.gather_rows(&rows)?;
        Ok(self.push(out, Op::GatherRows(a, rows)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats = parts.iter().map(|&p| self.node(p).map(|n| &n.value)).collect::<Result<Vec<_>>>()?;
        let out = Matrix::concat_cols(&mats)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats = parts.iter().map(|&p| self.node(p).map(|n| &n.value)).collect::<Result<Vec<_>>>()?;
        let out = Matrix::concat_rows(&mats)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: impl Into<Arc<[usize]>>) -> Result<Var> {
        let targets = targets.into();
        let l = &self.node(logits)?.value;
        if targets.len() != l.rows() || l.rows() == 0 {
            return Err(invalid(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                l.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(invalid(format!("target {bad} outside {} classes", l.cols())));
        }
        let total: f64 = (0..l.rows()).map(|r| log_sum_exp(l.row(r)) - l.get(r, targets[r])).sum();
        let out = Matrix::filled(1, 1, total / l.rows() as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, targets)))
    }

    /// Mean over rows of the cross-entropy of `softmax(logits)` against `probs`.
    pub fn soft_cross_entropy(&mut self, logits: Var, probs: Arc<Matrix>) -> Result<Var> {
        let l = &self.node(logits)?.value;
        if l.shape() != probs.shape() || l.rows() == 0 {
            return Err(Error::DimensionMismatch {
                op: "soft_cross_entropy",
                left: l.shape(),
                right: probs.shape(),
            });
        }
        let mut total = 0.0;
        for r in 0..l.rows() {
            let lse = log_sum_exp(l.row(r));
            total -= probs.row(r).iter().zip(l.row(r)).map(|(p, z)| p * (z - lse)).sum::<f64>();
        }
        let out = Matrix::filled(1, 1, total / l.rows() as f64);
        Ok(self.push(out, Op::SoftCrossEntropy(logits, probs)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::filled(1, 1, self.node(a)?.value.sum());
        Ok(self.push(out, Op::Sum(a)))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = self.node(output)?;
        if out_node.value.shape() != (1, 1) {
            return Err(invalid("backward needs a 1x1 output"));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul_transposed(vb)?)?;
                    accumulate(&mut grads, *b, va.transposed_matmul(&g)?)?;
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul(vb)?)?;
                    accumulate(&mut grads, *b, g.transposed_matmul(va)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Hadamard(a, b) => {
                    accumulate(&mut grads, *a, g.hadamard(self.value(*b))?)?;
                    accumulate(&mut grads, *b, g.hadamard(self.value(*a))?)?;
                }
                Op::RowSoftmax(a) | Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Rotate(a, rot) => accumulate(&mut grads, *a, rot.apply(&g, true)?)?,
                Op::GatherCols(a, cols) => {
                    let src = self.value(*a);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for (k, &c) in cols.iter().enumerate() {
                            let v = dx.get(r, c) + g.get(r, k);
                            dx.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::GatherRows(a, rows) => {
                    let src = self.value(*a);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(start, w)?)?;
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        accumulate(&mut grads, *p, g.slice_rows(start, h)?)?;
                        start += h;
                    }
                }
                Op::CrossEntropy(a, targets) => {
                    let l = self.value(*a);
                    let scale = g.get(0, 0) / l.rows() as f64;
                    let mut dx = l.row_softmax();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dx.get(r, t) - 1.0;
                        dx.set(r, t, v);
                    }
                    accumulate(&mut grads, *a, dx.scale(scale))?;
                }
                Op::SoftCrossEntropy(a, probs) => {
                    let l = self.value(*a);
                    let scale = g.get(0, 0) / l.rows() as f64;
                    let mut dx = l.row_softmax();
                    for r in 0..l.rows() {
                        // rows of `probs` need not sum to one
                        let mass: f64 = probs.row(r).iter().sum();
                        for (d, p) in dx.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d = *d * mass - p;
                        }
                    }
                    accumulate(&mut grads, *a, dx.scale(scale))?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape()).collect(),
            leaves: self.nodes.iter().map(|nd| matches!(nd.op, Op::Leaf)).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `∂output/∂leaf` for a scalar `output` recorded on `tape`.
pub fn grad(tape: &Tape, output: Var, leaf: Var) -> Result<Matrix> {
    if leaf.0 >= tape.len() {
        return Err(Error::UnknownVariable(leaf.0));
    }
    if !tape.is_leaf(leaf) {
        return Err(Error::NotALeaf(leaf.0));
    }
    tape.backward(output)?.wrt(leaf)
}

#[cfg(test)]
impl Var {
    pub(crate) fn from_index_for_tests(i: usize) -> Self {
        Var(i)
    }
}
