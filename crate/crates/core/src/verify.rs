//! Executable checks of the structural claims behind pair pruning.
//!
//! * Commutativity: rotating the compressed keys by their retained index and
//!   then expanding equals rotating the expanded keys.
//! * Loss bound: the loss change from shrinking pruned key pairs by `ε`
//!   against `½·ε²·Σ σ_p`, on a synthetic quadratic and on the toy model.
//! * Greedy optimality: the top-`m` pairs minimize the pruned score mass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::factorize::select_pairs;
use crate::numcore::Matrix;
use crate::rope::{rotate, rotate_indexed, PairingKind, PairingScheme, RetainedIndex, RopeConfig};
use crate::scoring::{estimate_fisher, sum_pairs};
use crate::toymodel::{mean_loss, CalibrationSet, KeyProjection, Model, Slot};

/// `max |RoPE_indexed(X·A)·B − RoPE(X·A·B)|` for one compressed head.
pub fn commutativity_deviation(
    x: &Matrix,
    a: &Matrix,
    retained: &RetainedIndex,
    cfg: &RopeConfig,
    positions: &[usize],
) -> Result<f64> {
    let b = retained.expansion_matrix(cfg.head_dim());
    let xa = x.matmul(a)?;
    let lhs = rotate_indexed(&xa, positions, cfg, retained)?.matmul(&b)?;
    let rhs = rotate(&xa.matmul(&b)?, positions, cfg)?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// Diagnostic only: swaps one column of the first retained pair for a pruned
/// column, so `A` no longer holds whole pairs, while the rotation still
/// follows the uncorrupted index. `w` is the full `rows × D` projection.
pub fn misaligned_deviation(
    x: &Matrix,
    w: &Matrix,
    retained: &RetainedIndex,
    cfg: &RopeConfig,
    positions: &[usize],
) -> Result<f64> {
    let d = cfg.head_dim();
    let stray = (0..d)
        .find(|c| retained.columns().binary_search(c).is_err())
        .ok_or_else(|| invalid("misalignment needs at least one pruned pair"))?;
    let (_, partner) = cfg.scheme.columns(retained.pairs()[0]);
    let columns: Vec<usize> = retained.columns().iter().map(|&c| if c == partner { stray } else { c }).collect();
    let a = w.gather_cols(&columns)?;
    let mut b = Matrix::zeros(columns.len(), d);
    for (i, &c) in columns.iter().enumerate() {
        b.set(i, c, 1.0);
    }
    let xa = x.matmul(&a)?;
    let lhs = rotate_indexed(&xa, positions, cfg, retained)?.matmul(&b)?;
    let rhs = rotate(&xa.matmul(&b)?, positions, cfg)?;
    Ok(lhs.max_abs_diff(&rhs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommutativityReport {
    pub heads: usize,
    pub trials: usize,
    pub max_deviation: f64,
}

fn random_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..4096)).collect()
}

/// Checks every pruned key head of `model` on `trials` random inputs of 6 rows.
pub fn check_commutativity(model: &Model, trials: usize, seed: u64) -> Result<CommutativityReport> {
    let spec = &model.spec;
    let cfg = spec.rope()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CommutativityReport { heads: 0, trials, max_deviation: 0.0 };
    for layer in &model.layers {
        let KeyProjection::Pruned { a_k, retained, .. } = &layer.key else { continue };
        for (g, r) in retained.iter().enumerate() {
            let a = a_k.slice_cols(g * r.width(), r.width())?;
            report.heads += 1;
            for _ in 0..trials {
                let x = Matrix::random_normal(6, spec.model_dim(), 1.0, &mut rng);
                let positions = random_positions(&mut rng, 6);
                let dev = commutativity_deviation(&x, &a, r, &cfg, &positions)?;
                report.max_deviation = report.max_deviation.max(dev);
            }
        }
    }
    if report.heads == 0 {
        return Err(invalid("no pruned key projection installed"));
    }
    Ok(report)
}

/// One key pair of one kv head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub layer: usize,
    pub head: usize,
    pub pair: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub pruned: Vec<KeyPair>,
    pub epsilon: f64,
    pub delta_loss: f64,
    /// `½·ε²·Σ σ_p` with `σ_p` the summed Fisher entries of the pair's columns.
    pub bound: f64,
    pub ratio: f64,
    /// `½·ε²·Σ F ⊙ W²` over the pruned columns: the Fisher quadratic form of the perturbation itself.
    pub quadratic_form: f64,
    pub quadratic_ratio: f64,
    /// `Δℒ(ε) / Δℒ(ε/2)`; close to 4 when the change is dominated by the quadratic term.
    pub halving_ratio: f64,
    pub second_order: bool,
    /// Curvature part of `Δℒ(ε)` separated from the two evaluations, `2·(Δℒ(ε) − 2·Δℒ(ε/2))`.
    /// The remainder `Δℒ(ε) − quadratic_part` is the first-order (gradient) term.
    pub quadratic_part: f64,
}

const SECOND_ORDER_RANGE: (f64, f64) = (3.6, 4.4);

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 && num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn finish(
    pruned: Vec<KeyPair>,
    epsilon: f64,
    delta: f64,
    delta_half: f64,
    sigma_sum: f64,
    weighted_sum: f64,
) -> Result<BoundReport> {
    if !delta.is_finite() || !delta_half.is_finite() {
        return Err(Error::NonFinite("loss change".into()));
    }
    let bound = 0.5 * epsilon * epsilon * sigma_sum;
    let quadratic_form = 0.5 * epsilon * epsilon * weighted_sum;
    let halving_ratio = ratio(delta, delta_half);
    Ok(BoundReport {
        pruned,
        epsilon,
        delta_loss: delta,
        bound,
        ratio: ratio(delta, bound),
        quadratic_form,
        quadratic_ratio: ratio(delta, quadratic_form),
        halving_ratio,
        second_order: (SECOND_ORDER_RANGE.0..=SECOND_ORDER_RANGE.1).contains(&halving_ratio),
        quadratic_part: 2.0 * (delta - 2.0 * delta_half),
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("scale {epsilon} must lie in (0, 1]")))
    }
}

/// `ℒ(W) = ½‖G ⊙ (W − W₀)‖²` expanded around `W₀`, single head (`rows × D`).
/// The curvature `G²` stands in for the Fisher field.
pub fn check_quadratic_bound(
    g: &Matrix,
    w0: &Matrix,
    scheme: &PairingScheme,
    pruned: &[usize],
    epsilon: f64,
) -> Result<BoundReport> {
    check_epsilon(epsilon)?;
    if g.shape() != w0.shape() || w0.cols() != scheme.head_dim {
        return Err(invalid("curvature and weights must both be rows × D"));
    }
    let loss = |w: &Matrix| -> Result<f64> {
        let diff = g.hadamard(&w.sub(w0)?)?;
        Ok(0.5 * diff.data().iter().map(|v| v * v).sum::<f64>())
    };
    let shrink = |eps: f64| -> Result<Matrix> {
        let mut w = w0.clone();
        for &p in pruned {
            let (a, b) = scheme.columns(p);
            for r in 0..w.rows() {
                for c in [a, b] {
                    w.set(r, c, (1.0 - eps) * w0.get(r, c));
                }
            }
        }
        Ok(w)
    };
    let base = loss(w0)?;
    let delta = loss(&shrink(epsilon)?)? - base;
    let delta_half = loss(&shrink(epsilon / 2.0)?)? - base;
    let fisher = g.hadamard(g)?;
    let sigma = &sum_pairs(&fisher, scheme)?[0];
    let weighted = &sum_pairs(&fisher.hadamard(&w0.hadamard(w0)?)?, scheme)?[0];
    let pairs = pruned.iter().map(|&pair| KeyPair { layer: 0, head: 0, pair }).collect();
    let sigma_sum = pruned.iter().map(|&p| sigma[p]).sum();
    let weighted_sum = pruned.iter().map(|&p| weighted[p]).sum();
    finish(pairs, epsilon, delta, delta_half, sigma_sum, weighted_sum)
}

fn shrink_keys(model: &Model, pruned: &[KeyPair], epsilon: f64) -> Result<Model> {
    let spec = &model.spec;
    let scheme = spec.scheme()?;
    let mut out = model.clone();
    for kp in pruned {
        let KeyProjection::Dense { w_k, .. } = &mut out.layers[kp.layer].key else {
            return Err(invalid("loss bound needs dense keys"));
        };
        let (a, b) = scheme.columns(kp.pair);
        for c in [a, b] {
            let col = kp.head * spec.head_dim + c;
            for r in 0..w_k.rows() {
                w_k.set(r, col, (1.0 - epsilon) * w_k.get(r, col));
            }
        }
    }
    Ok(out)
}

/// Shrinks the given key pairs of a dense model by `ε` and compares the
/// calibration loss change with the Fisher bound estimated on the same windows.
pub fn check_loss_bound(
    model: &Model,
    calib: &CalibrationSet,
    pruned: &[KeyPair],
    epsilon: f64,
) -> Result<BoundReport> {
    check_epsilon(epsilon)?;
    let spec = &model.spec;
    let scheme = spec.scheme()?;
    if !model.is_dense() {
        return Err(invalid("loss bound needs a dense model"));
    }
    if let Some(bad) =
        pruned.iter().find(|p| p.layer >= spec.layers || p.head >= spec.kv_heads || p.pair >= scheme.num_pairs())
    {
        return Err(invalid(format!("{bad:?} out of range")));
    }
    let mut layers: Vec<usize> = pruned.iter().map(|p| p.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut sigma_sum = 0.0;
    let mut weighted_sum = 0.0;
    if !pruned.is_empty() {
        let targets: Vec<Slot> = layers.iter().map(|&l| Slot::Key(l)).collect();
        let fisher = estimate_fisher(model, calib, &targets)?;
        for &l in &layers {
            let field = fisher.get(Slot::Key(l)).expect("estimated above");
            let w_k = model.layers[l].key.key_matrix();
            let sigma = sum_pairs(field, &scheme)?;
            let weighted = sum_pairs(&field.hadamard(&w_k.hadamard(w_k)?)?, &scheme)?;
            for kp in pruned.iter().filter(|p| p.layer == l) {
                sigma_sum += sigma[kp.head][kp.pair];
                weighted_sum += weighted[kp.head][kp.pair];
            }
        }
    }
    let base = mean_loss(model, &calib.windows)?;
    let delta = mean_loss(&shrink_keys(model, pruned, epsilon)?, &calib.windows)? - base;
    let delta_half = mean_loss(&shrink_keys(model, pruned, epsilon / 2.0)?, &calib.windows)? - base;
    finish(pruned.to_vec(), epsilon, delta, delta_half, sigma_sum, weighted_sum)
}

/// The key pair with the smallest Fisher score over all layers and kv heads (ties: first).
pub fn lowest_key_pair(model: &Model, calib: &CalibrationSet) -> Result<KeyPair> {
    let scheme = model.spec.scheme()?;
    let targets: Vec<Slot> = (0..model.spec.layers).map(Slot::Key).collect();
    let fisher = estimate_fisher(model, calib, &targets)?;
    let mut best: Option<(f64, KeyPair)> = None;
    for (layer, (_, field)) in fisher.targets.iter().enumerate() {
        for (head, scores) in sum_pairs(field, &scheme)?.into_iter().enumerate() {
            for (pair, s) in scores.into_iter().enumerate() {
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, KeyPair { layer, head, pair }));
                }
            }
        }
    }
    best.map(|b| b.1).ok_or_else(|| invalid("model has no key pairs"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyCheck {
    pub m: usize,
    pub greedy: Vec<usize>,
    pub greedy_residual: f64,
    pub best_residual: f64,
    /// A subset with strictly smaller pruned mass than the greedy choice, if any.
    pub witness: Option<Vec<usize>>,
}

impl GreedyCheck {
    pub fn optimal(&self) -> bool {
        self.witness.is_none()
    }
}

const MAX_ENUMERATED_PAIRS: usize = 12;

/// Exhaustive comparison of the top-`m` selection with every `m`-subset.
pub fn check_greedy_optimality(scores: &[f64], m: usize) -> Result<GreedyCheck> {
    let n = scores.len();
    if n == 0 || n > MAX_ENUMERATED_PAIRS {
        return Err(invalid(format!("enumeration needs 1..={MAX_ENUMERATED_PAIRS} pairs, got {n}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("pair score".into()));
    }
    let scheme = PairingScheme::new(PairingKind::Adjacent, 2 * n)?;
    let greedy = select_pairs(scores, m, &scheme)?.pairs().to_vec();
    let residual = |keep: &dyn Fn(usize) -> bool| (0..n).filter(|&p| !keep(p)).map(|p| scores[p]).sum::<f64>();
    let greedy_residual = residual(&|p| greedy.contains(&p));
    let tol = 1e-12 * scores.iter().map(|s| s.abs()).sum::<f64>();
    let mut best_residual = greedy_residual;
    let mut witness = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let r = residual(&|p| mask & (1 << p) != 0);
        if r < best_residual {
            best_residual = r;
            if r < greedy_residual - tol {
                witness = Some((0..n).filter(|p| mask & (1 << p) != 0).collect());
            }
        }
    }
    Ok(GreedyCheck { m, greedy, greedy_residual, best_residual, witness })
}

/// One named check with its observed deviation and the tolerance it is held to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub deviation: f64,
    pub tolerance: f64,
    /// Advisory checks are reported but do not decide the overall outcome.
    pub gating: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

impl VerifySummary {
    pub fn new(checks: Vec<CheckOutcome>) -> Self {
        Self { passed: checks.iter().all(|c| c.passed || !c.gating), checks }
    }
}
