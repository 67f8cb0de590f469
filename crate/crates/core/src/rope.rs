//! Rotary position embedding: pairing conventions, frequencies, full-width
//! rotation and index-aware rotation of pruned (retained-pair) layouts.
//!
//! Pair and column indices are 0-based. Under [`PairingKind::Adjacent`] pair
//! `j` covers columns `(2j, 2j+1)`; under [`PairingKind::HalfSplit`] it covers
//! `(j, j + D/2)`.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{Matrix, PairRotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingKind {
    Adjacent,
    HalfSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingScheme {
    pub kind: PairingKind,
    pub head_dim: usize,
}

impl PairingScheme {
    pub fn new(kind: PairingKind, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(invalid(format!("head dim must be positive and even, got {head_dim}")));
        }
        Ok(Self { kind, head_dim })
    }

    pub fn num_pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// Columns rotated together by pair `j`.
    pub fn columns(&self, j: usize) -> (usize, usize) {
        match self.kind {
            PairingKind::Adjacent => (2 * j, 2 * j + 1),
            PairingKind::HalfSplit => (j, j + self.head_dim / 2),
        }
    }

    pub fn pair_of_column(&self, c: usize) -> usize {
        match self.kind {
            PairingKind::Adjacent => c / 2,
            PairingKind::HalfSplit => c % (self.head_dim / 2),
        }
    }

    /// `(col_a, col_b, pair)` for every pair of one full-width head.
    pub fn layout(&self) -> Vec<(usize, usize, usize)> {
        (0..self.num_pairs())
            .map(|j| {
                let (a, b) = self.columns(j);
                (a, b, j)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub scheme: PairingScheme,
}

impl RopeConfig {
    pub fn new(base: f64, scheme: PairingScheme) -> Result<Self> {
        if !(base.is_finite() && base > 0.0) {
            return Err(invalid(format!("rope base must be positive, got {base}")));
        }
        Ok(Self { base, scheme })
    }

    pub fn head_dim(&self) -> usize {
        self.scheme.head_dim
    }

    /// `θ_j = base^(−2j/D)` for `j` in `0..D/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.head_dim() as f64;
        (0..self.scheme.num_pairs()).map(|j| self.base.powf(-2.0 * j as f64 / d)).collect()
    }
}

/// Pairs kept for one head, in increasing original order, and the derived
/// column list (`RAPIndex`) that maps compressed columns back to original ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedIndex {
    pairs: Vec<usize>,
    columns: Vec<usize>,
}

impl RetainedIndex {
    pub fn new(pairs: Vec<usize>, scheme: &PairingScheme) -> Result<Self> {
        if pairs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("retained pairs must be strictly increasing"));
        }
        if let Some(&bad) = pairs.iter().find(|&&p| p >= scheme.num_pairs()) {
            return Err(invalid(format!("pair {bad} out of range for {} pairs", scheme.num_pairs())));
        }
        let mut columns: Vec<usize> = pairs
            .iter()
            .flat_map(|&j| {
                let (a, b) = scheme.columns(j);
                [a, b]
            })
            .collect();
        columns.sort_unstable();
        Ok(Self { pairs, columns })
    }

    pub fn full(scheme: &PairingScheme) -> Self {
        Self::new((0..scheme.num_pairs()).collect(), scheme).expect("full range is valid")
    }

    pub fn pairs(&self) -> &[usize] {
        &self.pairs
    }

    /// Original column of every compressed column.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// `(local_a, local_b, original_pair)` for the compressed layout.
    pub fn layout(&self, scheme: &PairingScheme) -> Vec<(usize, usize, usize)> {
        let local = |c: usize| self.columns.binary_search(&c).expect("column is retained");
        self.pairs
            .iter()
            .map(|&j| {
                let (a, b) = scheme.columns(j);
                (local(a), local(b), j)
            })
            .collect()
    }

    /// Dense `2m × D` binary expansion matrix (only for checks; the index form is canonical).
    pub fn expansion_matrix(&self, head_dim: usize) -> Matrix {
        let mut b = Matrix::zeros(self.width(), head_dim);
        for (i, &c) in self.columns.iter().enumerate() {
            b.set(i, c, 1.0);
        }
        b
    }
}

/// cos/sin values memoized per `(position, pair)`; lives for one forward pass.
#[derive(Debug)]
pub struct RotaryTable {
    freqs: Vec<f64>,
    memo: RefCell<HashMap<(usize, usize), (f64, f64)>>,
}

impl RotaryTable {
    pub fn new(cfg: &RopeConfig) -> Self {
        Self { freqs: cfg.frequencies(), memo: RefCell::new(HashMap::new()) }
    }

    pub fn cos_sin(&self, position: usize, pair: usize) -> (f64, f64) {
        *self.memo.borrow_mut().entry((position, pair)).or_insert_with(|| {
            let angle = position as f64 * self.freqs[pair];
            (angle.cos(), angle.sin())
        })
    }

    /// Rotation for rows at `positions` over a layout of `(col_a, col_b, original_pair)`.
    pub fn rotation(&self, layout: &[(usize, usize, usize)], positions: &[usize]) -> Result<PairRotation> {
        if let Some(&(_, _, j)) = layout.iter().find(|l| l.2 >= self.freqs.len()) {
            return Err(invalid(format!("pair {j} out of range for {} frequencies", self.freqs.len())));
        }
        let mut cos = Matrix::zeros(positions.len(), layout.len());
        let mut sin = Matrix::zeros(positions.len(), layout.len());
        for (r, &pos) in positions.iter().enumerate() {
            for (p, &(_, _, j)) in layout.iter().enumerate() {
                let (c, s) = self.cos_sin(pos, j);
                cos.set(r, p, c);
                sin.set(r, p, s);
            }
        }
        PairRotation::new(layout.iter().map(|&(a, b, _)| (a, b)).collect(), cos, sin)
    }
}

/// Concatenates per-head layouts; head `h` starts at `h · width`.
pub fn multi_head_layout(per_head: &[Vec<(usize, usize, usize)>], width: usize) -> Vec<(usize, usize, usize)> {
    per_head
        .iter()
        .enumerate()
        .flat_map(|(h, l)| l.iter().map(move |&(a, b, j)| (h * width + a, h * width + b, j)))
        .collect()
}

/// Applies RoPE to every row of a full-width `S × D` matrix.
pub fn rotate(x: &Matrix, positions: &[usize], cfg: &RopeConfig) -> Result<Matrix> {
    if x.cols() != cfg.head_dim() || positions.len() != x.rows() {
        return Err(invalid(format!(
            "rotate: input {}x{} with {} positions, head dim {}",
            x.rows(),
            x.cols(),
            positions.len(),
            cfg.head_dim()
        )));
    }
    RotaryTable::new(cfg).rotation(&cfg.scheme.layout(), positions)?.apply(x, false)
}

/// Applies RoPE to a compressed `S × 2m` matrix, rotating each retained pair
/// with the frequency of its original pair index.
pub fn rotate_indexed(
    x: &Matrix,
    positions: &[usize],
    cfg: &RopeConfig,
    retained: &RetainedIndex,
) -> Result<Matrix> {
    if let Some(&bad) = retained.pairs().iter().find(|&&p| p >= cfg.scheme.num_pairs()) {
        return Err(invalid(format!("retained pair {bad} out of range")));
    }
    if x.cols() != retained.width() || positions.len() != x.rows() {
        return Err(invalid(format!(
            "rotate_indexed: input {}x{} for {} retained pairs and {} positions",
            x.rows(),
            x.cols(),
            retained.num_pairs(),
            positions.len()
        )));
    }
    RotaryTable::new(cfg).rotation(&retained.layout(&cfg.scheme), positions)?.apply(x, false)
}
