//! Importance of RoPE pairs: empirical Fisher information of the key/value
//! projections, summed over each pair's two columns, plus a weight-magnitude
//! baseline.
//!
//! Key columns are grouped by the model's RoPE pairing. Value columns are not
//! rotated; they are grouped into adjacent pseudo-pairs `(2x, 2x+1)` so both
//! sides share the same budget machinery.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{Matrix, Tape};
use crate::rope::{PairingKind, PairingScheme};
use crate::toymodel::{loss_ce_on_tape, CalibrationSet, Leaves, Model, Slot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    K,
    V,
}

impl Side {
    pub fn slot(self, layer: usize) -> Slot {
        match self {
            Side::K => Slot::Key(layer),
            Side::V => Slot::Value(layer),
        }
    }
}

/// Mean squared per-sample gradient for each target matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherEstimate {
    pub targets: Vec<(Slot, Matrix)>,
    pub samples: usize,
}

impl FisherEstimate {
    pub fn get(&self, slot: Slot) -> Option<&Matrix> {
        self.targets.iter().find(|(s, _)| *s == slot).map(|(_, m)| m)
    }
}

/// Key and value projections of every layer, layer-major, K before V.
pub fn kv_targets(model: &Model) -> Vec<Slot> {
    (0..model.spec.layers)
        .flat_map(|l| [Slot::Key(l), Slot::Value(l)])
        .collect()
}

pub fn estimate_fisher(model: &Model, calib: &CalibrationSet, targets: &[Slot]) -> Result<FisherEstimate> {
    estimate_fisher_scaled(model, calib, targets, 1.0)
}

/// Fisher of the loss multiplied by `scale`.
pub(crate) fn estimate_fisher_scaled(
    model: &Model,
    calib: &CalibrationSet,
    targets: &[Slot],
    scale: f64,
) -> Result<FisherEstimate> {
    if calib.is_empty() {
        return Err(invalid("empty calibration set"));
    }
    if targets.is_empty() {
        return Err(invalid("no Fisher targets"));
    }
    let per_sample = calib
        .windows
        .par_iter()
        .map(|w| {
            let mut tape = Tape::new();
            let mut src = Leaves::new(targets.to_vec());
            let loss = loss_ce_on_tape(model, w, &mut tape, &mut src)?;
            let loss = tape.scale(loss, scale)?;
            let grads = tape.backward(loss)?;
            targets
                .iter()
                .map(|&slot| {
                    let var = src
                        .var(slot)
                        .ok_or_else(|| invalid(format!("{slot:?} is not a weight of this model")))?;
                    Ok(grads.wrt(var)?.map(|g| g * g))
                })
                .collect::<Result<Vec<Matrix>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // Fixed-order reduction keeps results independent of thread scheduling.
    let n = per_sample.len();
    let mut sums = per_sample[0].clone();
    for sample in &per_sample[1..] {
        for (acc, g) in sums.iter_mut().zip(sample) {
            acc.add_assign(g)?;
        }
    }
    let targets = targets
        .iter()
        .zip(sums)
        .map(|(&slot, m)| (slot, m.scale(1.0 / n as f64)))
        .collect();
    Ok(FisherEstimate { targets, samples: n })
}

/// Pair scores of one (layer, side) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub layer: usize,
    pub side: Side,
    /// `heads[h][p]` is `σ_p` of kv head `h`.
    pub heads: Vec<Vec<f64>>,
}

impl GroupScores {
    pub fn total(&self) -> f64 {
        self.heads.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScoreTable {
    pub head_dim: usize,
    /// Pairing of the key side; values always use adjacent pseudo-pairs.
    pub pairing: PairingKind,
    pub groups: Vec<GroupScores>,
}

impl PairScoreTable {
    pub fn group(&self, layer: usize, side: Side) -> Option<&GroupScores> {
        self.groups.iter().find(|g| g.layer == layer && g.side == side)
    }

    /// Grand total over all groups.
    pub fn total(&self) -> f64 {
        self.groups.iter().map(GroupScores::total).sum()
    }

    pub fn scheme(&self, side: Side) -> Result<PairingScheme> {
        match side {
            Side::K => PairingScheme::new(self.pairing, self.head_dim),
            Side::V => PairingScheme::new(PairingKind::Adjacent, self.head_dim),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        if t.groups.iter().flat_map(|g| g.heads.iter().flatten()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("pair scores must be finite and non-negative"));
        }
        Ok(t)
    }
}

/// `σ_p` for each head of a `rows × heads·D` field: sum over all rows of the pair's two columns.
pub fn sum_pairs(field: &Matrix, scheme: &PairingScheme) -> Result<Vec<Vec<f64>>> {
    let d = scheme.head_dim;
    if field.cols() == 0 || field.cols() % d != 0 {
        return Err(Error::DimensionMismatch {
            op: "pair_scores",
            left: field.shape(),
            right: (d, d),
        });
    }
    let mut col_sums = vec![0.0; field.cols()];
    for r in 0..field.rows() {
        for (acc, v) in col_sums.iter_mut().zip(field.row(r)) {
            *acc += v;
        }
    }
    Ok(col_sums
        .chunks(d)
        .map(|head| {
            (0..scheme.num_pairs())
                .map(|j| {
                    let (a, b) = scheme.columns(j);
                    head[a] + head[b]
                })
                .collect()
        })
        .collect())
}

fn table_from_fields<'a>(
    fields: impl Iterator<Item = (usize, Side, &'a Matrix)>,
    head_dim: usize,
    pairing: PairingKind,
) -> Result<PairScoreTable> {
    let mut table = PairScoreTable { head_dim, pairing, groups: Vec::new() };
    for (layer, side, field) in fields {
        let heads = sum_pairs(field, &table.scheme(side)?)?;
        table.groups.push(GroupScores { layer, side, heads });
    }
    table.groups.sort_by_key(|g| (g.layer, g.side));
    Ok(table)
}

/// Aggregates Fisher entries into pair scores. Non key/value targets are ignored.
pub fn pair_scores(f: &FisherEstimate, scheme: &PairingScheme) -> Result<PairScoreTable> {
    let fields = f.targets.iter().filter_map(|(slot, m)| match slot {
        Slot::Key(l) => Some((*l, Side::K, m)),
        Slot::Value(l) => Some((*l, Side::V, m)),
        _ => None,
    });
    table_from_fields(fields, scheme.head_dim, scheme.kind)
}

/// Sum of squared weights of each pair's two columns, for a dense model.
pub fn magnitude_scores(model: &Model) -> Result<PairScoreTable> {
    let weights = model
        .dense_weights()
        .ok_or_else(|| invalid("magnitude scores need a dense model"))?;
    let squared: Vec<(usize, Side, Matrix)> = weights
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, w)| [(l, Side::K, w.w_k.map(|x| x * x)), (l, Side::V, w.w_v.map(|x| x * x))])
        .collect();
    table_from_fields(squared.iter().map(|(l, s, m)| (*l, *s, m)), model.spec.head_dim, model.spec.pairing)
}

/// Fisher pair scores of all key/value projections over the calibration set.
pub fn fisher_scores(model: &Model, calib: &CalibrationSet) -> Result<PairScoreTable> {
    let f = estimate_fisher(model, calib, &kv_targets(model))?;
    pair_scores(&f, &model.spec.scheme()?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::toymodel::{loss_ce, ModelSpec};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn half(d: usize) -> PairingScheme {
        PairingScheme::new(PairingKind::HalfSplit, d).unwrap()
    }

    #[test]
    fn constant_field_scores_twice_the_rows() {
        let scores = sum_pairs(&Matrix::filled(32, 16, 1.0), &half(8)).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().flatten().all(|&s| s == 64.0));
    }

    #[test]
    fn single_column_field() {
        let mut f = Matrix::zeros(5, 8);
        for r in 0..5 {
            f.set(r, 6, r as f64);
        }
        // Column 6 belongs to pair 2 under half-split pairing of D=8.
        assert_eq!(sum_pairs(&f, &half(8)).unwrap()[0], vec![0.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn mismatched_head_dim_is_rejected() {
        assert!(sum_pairs(&Matrix::zeros(4, 12), &half(8)).is_err());
    }

    #[test]
    fn magnitude_scores_match_norm_oracle() {
        let model = Model::init(&ModelSpec::default()).unwrap();
        let t = magnitude_scores(&model).unwrap();
        assert_eq!(t.groups.len(), 4);
        let w = model.dense_weights().unwrap();
        let scheme = half(8);
        for g in &t.groups {
            let m = if g.side == Side::K { &w.layers[g.layer].w_k } else { &w.layers[g.layer].w_v };
            for (h, pairs) in g.heads.iter().enumerate() {
                for (p, &s) in pairs.iter().enumerate() {
                    let (a, b) = if g.side == Side::K { scheme.columns(p) } else { (2 * p, 2 * p + 1) };
                    let cols = m.gather_cols(&[h * 8 + a, h * 8 + b]).unwrap();
                    let norm = cols.frobenius_norm();
                    assert!((s - norm * norm).abs() <= 1e-12 * s.max(1.0));
                }
            }
        }
        let mut unit = model.clone();
        if let crate::toymodel::KeyProjection::Dense { w_k, .. } = &mut unit.layers[0].key {
            *w_k = Matrix::from_fn(32, 16, |r, _| if r % 2 == 0 { 1.0 } else { -1.0 });
        }
        let t = magnitude_scores(&unit).unwrap();
        assert!(t.group(0, Side::K).unwrap().heads.iter().flatten().all(|&s| s == 64.0));
    }

    fn tiny() -> (Model, CalibrationSet) {
        let spec = ModelSpec { layers: 1, q_heads: 1, kv_heads: 1, head_dim: 4, vocab: 6, seed: 3, ..ModelSpec::default() };
        let model = Model::init(&spec).unwrap();
        let calib = CalibrationSet::generate(6, 3, 5, 9).unwrap();
        (model, calib)
    }

    #[test]
    fn fisher_matches_finite_difference_gradients() {
        let (model, calib) = tiny();
        let f = estimate_fisher(&model, &calib, &kv_targets(&model)).unwrap();
        assert_eq!(f.samples, 3);
        let h = 1e-5;
        for side in [Side::K, Side::V] {
            let fisher = f.get(side.slot(0)).unwrap();
            let mut oracle = Matrix::zeros(fisher.rows(), fisher.cols());
            for w in &calib.windows {
                for i in 0..oracle.len() {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        let target = match side {
                            Side::K => m.layers[0].key.matrices_mut().1,
                            Side::V => m.layers[0].value.matrices_mut().0,
                        };
                        target.data_mut()[i] += delta;
                        loss_ce(&m, w).unwrap()
                    };
                    let g = (eval(h) - eval(-h)) / (2.0 * h);
                    oracle.data_mut()[i] += g * g / 3.0;
                }
            }
            let err = fisher.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
            assert!(err <= 1e-3, "{side:?}: rel err {err}");
            assert!(fisher.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dead_input_feature_has_zero_fisher() {
        let (mut model, calib) = tiny();
        for t in 0..6 {
            model.embedding.set(t, 2, 0.0);
        }
        let f = estimate_fisher(&model, &calib, &kv_targets(&model)).unwrap();
        // Input feature 2 multiplies row 2 of the projections only.
        for (_, m) in &f.targets {
            assert!(m.row(2).iter().all(|&v| v == 0.0));
            assert!(m.row(0).iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn symmetric_heads_get_equal_fisher() {
        let spec = ModelSpec { layers: 1, q_heads: 2, kv_heads: 2, head_dim: 4, vocab: 8, seed: 5, ..ModelSpec::default() };
        let mut model = Model::init(&spec).unwrap();
        let mut r = rng(6);
        let block_q = Matrix::random_normal(8, 4, 0.5, &mut r);
        let block_k = Matrix::random_normal(8, 4, 0.5, &mut r);
        let block_v = Matrix::random_normal(8, 4, 0.5, &mut r);
        let block_o = Matrix::random_normal(4, 8, 0.5, &mut r);
        model.layers[0].key = crate::toymodel::KeyProjection::Dense {
            w_q: Matrix::concat_cols(&[&block_q, &block_q]).unwrap(),
            w_k: Matrix::concat_cols(&[&block_k, &block_k]).unwrap(),
        };
        model.layers[0].value = crate::toymodel::ValueProjection::Dense {
            w_v: Matrix::concat_cols(&[&block_v, &block_v]).unwrap(),
            w_o: Matrix::concat_rows(&[&block_o, &block_o]).unwrap(),
        };
        let calib = CalibrationSet::generate(8, 4, 6, 1).unwrap();
        let t = pair_scores(&estimate_fisher(&model, &calib, &kv_targets(&model)).unwrap(), &half(4)).unwrap();
        for g in &t.groups {
            for (a, b) in g.heads[0].iter().zip(&g.heads[1]) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn pair_scores_conserve_mass_and_match_double_loop() {
        let model = Model::init(&ModelSpec::default()).unwrap();
        let calib = CalibrationSet::generate(64, 2, 8, 4).unwrap();
        let f = estimate_fisher(&model, &calib, &kv_targets(&model)).unwrap();
        let t = pair_scores(&f, &half(8)).unwrap();
        assert_eq!(t.groups.iter().map(|g| (g.layer, g.side)).collect::<Vec<_>>(), vec![
            (0, Side::K),
            (0, Side::V),
            (1, Side::K),
            (1, Side::V)
        ]);
        for g in &t.groups {
            let fm = f.get(g.side.slot(g.layer)).unwrap();
            assert!((g.total() - fm.sum()).abs() <= 1e-12 * fm.sum());
            let scheme = t.scheme(g.side).unwrap();
            for (h, pairs) in g.heads.iter().enumerate() {
                for (p, &s) in pairs.iter().enumerate() {
                    let (a, b) = scheme.columns(p);
                    let mut want = 0.0;
                    for n in 0..fm.rows() {
                        for c in [a, b] {
                            want += fm.get(n, h * 8 + c);
                        }
                    }
                    assert!((s - want).abs() <= 1e-12 * want.max(1e-30));
                }
            }
        }
    }

    #[test]
    fn order_invariance_and_quadratic_homogeneity() {
        let model = Model::init(&ModelSpec::default()).unwrap();
        let calib = CalibrationSet::generate(64, 4, 8, 4).unwrap();
        let targets = kv_targets(&model);
        let base = pair_scores(&estimate_fisher(&model, &calib, &targets).unwrap(), &half(8)).unwrap();
        let mut reversed = calib.clone();
        reversed.windows.reverse();
        let rev = pair_scores(&estimate_fisher(&model, &reversed, &targets).unwrap(), &half(8)).unwrap();
        let scaled = pair_scores(&estimate_fisher_scaled(&model, &calib, &targets, 3.0).unwrap(), &half(8)).unwrap();
        for ((a, b), c) in base.groups.iter().zip(&rev.groups).zip(&scaled.groups) {
            for ((x, y), z) in a.heads.iter().flatten().zip(b.heads.iter().flatten()).zip(c.heads.iter().flatten()) {
                assert!((x - y).abs() <= 1e-12 * x);
                assert!((z - 9.0 * x).abs() <= 1e-10 * z);
            }
            for (hx, hz) in a.heads.iter().zip(&c.heads) {
                let order = |v: &Vec<f64>| {
                    let mut idx: Vec<usize> = (0..v.len()).collect();
                    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
                    idx
                };
                assert_eq!(order(hx), order(hz));
            }
        }
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let model = Model::init(&ModelSpec::default()).unwrap();
        let t = magnitude_scores(&model).unwrap();
        assert_eq!(PairScoreTable::from_json(&t.to_json().unwrap()).unwrap(), t);
        let mut bad = t.clone();
        bad.groups[0].heads[0][0] = -1.0;
        assert!(PairScoreTable::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn empty_calibration_is_rejected() {
        let model = Model::init(&ModelSpec::default()).unwrap();
        let mut calib = CalibrationSet::generate(64, 1, 4, 0).unwrap();
        calib.windows.clear();
        assert!(estimate_fisher(&model, &calib, &kv_targets(&model)).is_err());
    }

    proptest! {
        #[test]
        fn pair_sums_preserve_total(seed in 0u64..1000, heads in 1usize..4, rows in 1usize..6) {
            let f = Matrix::random_normal(rows, heads * 8, 1.0, &mut rng(seed)).map(f64::abs);
            for kind in [PairingKind::HalfSplit, PairingKind::Adjacent] {
                let s = sum_pairs(&f, &PairingScheme::new(kind, 8).unwrap()).unwrap();
                let total: f64 = s.iter().flatten().sum();
                prop_assert!((total - f.sum()).abs() <= 1e-12 * f.sum().max(1.0));
            }
        }
    }
}
