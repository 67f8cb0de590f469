//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines print in order. The process
//! fails when any criterion outside `EXPECTED_RED` fails.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rap_core::analyze::{analytic_kv_projection, measure_forward, parameter_break_even, sweep, sweep_csv, sweep_json};
use rap_core::budget::{allocate, BudgetMode, BudgetPlan};
use rap_core::factorize::{build_compressed, CompressedModel, Method};
use rap_core::numcore::{FlopTag, Matrix, Tape, Var};
use rap_core::recover::{distill, KdConfig};
use rap_core::rope::{PairingKind, PairingScheme, RetainedIndex, RopeConfig, RotaryTable};
use rap_core::scoring::{estimate_fisher, fisher_scores, kv_targets, magnitude_scores, GroupScores, PairScoreTable, Side};
use rap_core::toymodel::{
    base_model, forward_decode, forward_prefill, logits, loss_ce, loss_ce_on_tape, save_checkpoint, CalibrationSet,
    Leaves, MarkovLanguage, Model, ModelSpec, PretrainConfig, Slot,
};
use rap_core::verify::{
    check_commutativity, check_greedy_optimality, check_loss_bound, check_quadratic_bound, commutativity_deviation,
    lowest_key_pair,
};

/// Criteria allowed to fail without failing the process. Each one still prints
/// its failures in full.
const EXPECTED_RED: &[u32] = &[10];

const SEED: u64 = 42;
const RATIOS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

struct Verdict {
    passed: bool,
    summary: String,
    details: Vec<String>,
}

impl Verdict {
    fn new(passed: bool, summary: String) -> Self {
        Self { passed, summary, details: Vec::new() }
    }
}

type Outcome = Result<Verdict, Box<dyn std::error::Error>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shared state: the pretrained base model and its calibration artifacts.
struct Fixture {
    spec: ModelSpec,
    base: Model,
    language: MarkovLanguage,
    calib: CalibrationSet,
    scores: PairScoreTable,
}

impl Fixture {
    fn build() -> Result<Self, Box<dyn std::error::Error>> {
        let spec = ModelSpec { seed: SEED, ..ModelSpec::default() };
        let base = base_model(&spec, &PretrainConfig::default())?;
        let language = MarkovLanguage::new(spec.vocab, spec.seed)?;
        let calib = language.sample(16, 64, SEED)?;
        let scores = fisher_scores(&base, &calib)?;
        Ok(Self { spec, base, language, calib, scores })
    }

    fn rap(&self, rho: f64) -> Result<(BudgetPlan, CompressedModel), Box<dyn std::error::Error>> {
        let plan = allocate(&self.scores, rho, BudgetMode::Adaptive)?;
        let compressed = build_compressed(&self.base, Method::Rap, rho, Some(&self.scores), Some(&plan))?;
        Ok((plan, compressed))
    }
}

fn random_tokens(r: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| r.random_range(0..vocab)).collect()
}

fn c1_commutativity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for trial in 0..100 {
        let kind = if trial % 2 == 0 { PairingKind::Adjacent } else { PairingKind::HalfSplit };
        let d = [8, 16, 128][trial % 3];
        let scheme = PairingScheme::new(kind, d)?;
        let cfg = RopeConfig::new(10_000.0, scheme)?;
        let m = r.random_range(1..=d / 2);
        let mut pairs: Vec<usize> = (0..d / 2).collect();
        for i in 0..pairs.len() {
            let j = r.random_range(i..pairs.len());
            pairs.swap(i, j);
        }
        pairs.truncate(m);
        pairs.sort_unstable();
        let retained = RetainedIndex::new(pairs, &scheme)?;
        let w = Matrix::random_normal(12, d, 1.0, &mut r);
        let a = w.gather_cols(retained.columns())?;
        let x = Matrix::random_normal(6, 12, 1.0, &mut r);
        let positions: Vec<usize> = (0..6).map(|_| r.random_range(0..4096)).collect();
        worst = worst.max(commutativity_deviation(&x, &a, &retained, &cfg, &positions)?);
        count += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::new(
        worst <= 1e-12 && secs < 10.0,
        format!("max deviation {worst:.2e} over {count} factorizations (tol 1e-12), {secs:.2} s (limit 10 s)"),
    ))
}

fn c2_zero_compression(fx: &Fixture) -> Outcome {
    let (_, compressed) = fx.rap(0.0)?;
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..32 {
        let len = r.random_range(4..=48);
        let tokens = random_tokens(&mut r, len, fx.spec.vocab);
        worst = worst.max(logits(&fx.base, &tokens)?.max_abs_diff(&logits(&compressed.model, &tokens)?));
    }
    Ok(Verdict::new(worst <= 1e-9, format!("max logit deviation {worst:.2e} on 32 sequences (tol 1e-9)")))
}

fn c3_latent_equivalence(fx: &Fixture) -> Outcome {
    let mut r = rng(3);
    let mut worst_prefill: f64 = 0.0;
    let mut worst_decode: f64 = 0.0;
    for rho in RATIOS {
        let (_, compressed) = fx.rap(rho)?;
        let reference = compressed.reference_model()?;
        for _ in 0..8 {
            let tokens = random_tokens(&mut r, 24, fx.spec.vocab);
            let want = logits(&reference, &tokens)?;
            worst_prefill = worst_prefill.max(logits(&compressed.model, &tokens)?.max_abs_diff(&want));
            let split = 10;
            let (_, mut cache, _) = forward_prefill(&compressed.model, &tokens[..split])?;
            for (i, &t) in tokens.iter().enumerate().skip(split) {
                let row = forward_decode(&compressed.model, &mut cache, t)?;
                let expect = Matrix::new(1, want.cols(), want.row(i).to_vec())?;
                worst_decode = worst_decode.max(row.max_abs_diff(&expect));
            }
        }
    }
    let worst = worst_prefill.max(worst_decode);
    Ok(Verdict::new(
        worst <= 1e-9,
        format!(
            "prefill {worst_prefill:.2e}, decode {worst_decode:.2e} against the reconstruct-then-attend reference \
             at rho 0.1..0.5 (tol 1e-9)"
        ),
    ))
}

fn c4_flops_table() -> Outcome {
    let expected = [
        (Method::Baseline, 0.0, 2.097152),
        (Method::Svd, 0.1, 1.946),
        (Method::Palu, 0.1, 1.917),
        (Method::Rap, 0.1, 1.887),
        (Method::Svd, 0.5, 1.081),
        (Method::Palu, 0.5, 1.065),
        (Method::Rap, 0.5, 1.049),
    ];
    let mut v = Verdict::new(true, String::new());
    let mut worst: f64 = 0.0;
    for (method, rho, want) in expected {
        let got = analytic_kv_projection(method, 1.0 - rho, 32, 128, 1)?.flops / 1e6;
        let dev = (got - want).abs();
        worst = worst.max(dev);
        v.details.push(format!("{method} rho={rho}: {got:.6}M vs {want}M"));
    }
    v.passed = worst <= 1e-3;
    v.summary = format!("H=32, D=128, S=1: max deviation {worst:.2e}M over 7 cells (tol 0.001M)");
    Ok(v)
}

fn c5_linear_scaling() -> Outcome {
    let mut v = Verdict::new(true, String::new());
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    for (head_dim, mode) in [(20, BudgetMode::Uniform), (20, BudgetMode::Adaptive), (8, BudgetMode::Adaptive)] {
        let spec = ModelSpec { head_dim, seed: 5, ..ModelSpec::default() };
        let model = Model::init(&spec)?;
        let calib = CalibrationSet::generate(spec.vocab, 4, 32, 5)?;
        let scores = fisher_scores(&model, &calib)?;
        let tokens: Vec<usize> = (0..16).map(|i| (i * 7 + 1) % spec.vocab).collect();
        let dense = measure_forward(&build_compressed(&model, Method::Baseline, 0.0, None, None)?, &tokens)?;
        // One pair per head is 2 of D columns.
        let slack = 2.0 / head_dim as f64;
        for rho in RATIOS {
            let plan = allocate(&scores, rho, mode)?;
            let c = build_compressed(&model, Method::Rap, rho, Some(&scores), Some(&plan))?;
            let rep = measure_forward(&c, &tokens)?;
            let r = 1.0 - rho;
            let params = rep.params_attention as f64 / dense.params_attention as f64;
            let flops = rep.flops_kv_projection.measured / dense.flops_kv_projection.measured;
            let dev = (params - r).abs().max((flops - r).abs());
            worst_excess = worst_excess.max(dev - slack);
            if dev > slack {
                v.passed = false;
            }
            v.details.push(format!(
                "D={head_dim} {mode:?} rho={rho}: params {params:.4}, kv flops {flops:.4}, r {r:.2}, slack {slack:.3}"
            ));
        }
    }
    v.summary = format!(
        "attention params and measured KV-projection FLOPs within one pair per head of r x baseline \
         (worst margin {:.4})",
        -worst_excess
    );
    Ok(v)
}

fn c6_method_ordering() -> Outcome {
    let spec = ModelSpec { head_dim: 20, seed: 6, ..ModelSpec::default() };
    let model = Model::init(&spec)?;
    let scores = magnitude_scores(&model)?;
    let tokens: Vec<usize> = (0..16).map(|i| (i * 7 + 1) % spec.vocab).collect();
    let ratios: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let methods = [Method::Svd, Method::Palu, Method::Rap];
    let rows = sweep(&model, &scores, BudgetMode::Uniform, &methods, &ratios, &tokens)?;
    let flops = |m: Method, rho: f64| {
        rows.iter()
            .find(|row| row.report.method == m && row.report.rho == rho)
            .map(|row| row.report.flops_kv_projection.measured)
            .expect("swept")
    };
    let mut v = Verdict::new(true, String::new());
    let mut ordered = 0;
    for &rho in &ratios {
        let (s, p, r) = (flops(Method::Svd, rho), flops(Method::Palu, rho), flops(Method::Rap, rho));
        if r < p && p < s {
            ordered += 1;
        } else {
            v.passed = false;
            v.details.push(format!("rho={rho}: rap {r}, palu {p}, svd {s}"));
        }
    }
    let svd_even = parameter_break_even(Method::Svd, 1).expect("svd has a break-even");
    let palu_even = parameter_break_even(Method::Palu, 1).expect("palu has a break-even");
    let dev_svd = (svd_even - 0.5).abs();
    let dev_palu = (palu_even - 1.0 / 3.0).abs();
    // Closed-form cross-check: at the break-even ratio the parameters match the baseline.
    let base = analytic_kv_projection(Method::Baseline, 1.0, 1, 128, 1)?.params;
    let at_svd = analytic_kv_projection(Method::Svd, 1.0 - svd_even, 1, 128, 1)?.params;
    let at_palu = analytic_kv_projection(Method::Palu, 1.0 - palu_even, 1, 128, 1)?.params;
    let dev_params = ((at_svd - base) / base).abs().max(((at_palu - base) / base).abs());
    v.passed &= dev_svd <= 1e-12 && dev_palu <= 1e-12 && dev_params <= 1e-12;
    v.summary = format!(
        "rap < palu < svd measured FLOPs at {ordered}/{} ratios (D=20); break-even svd {svd_even} palu {palu_even:.15} \
         (H=1, tol 1e-12; param mismatch {dev_params:.1e})",
        ratios.len()
    );
    Ok(v)
}

const FD_STEP: f64 = 1e-5;

fn rel_err(got: &Matrix, want: &Matrix) -> f64 {
    let diff = got.sub(want).expect("same shape").frobenius_norm();
    diff / want.frobenius_norm().max(1e-8)
}

/// Reduces `out` to a scalar with fixed random weights so every output entry matters.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.hadamard(out, w).expect("shapes agree");
    tape.sum(prod).expect("sum")
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> rap_core::Result<Var> + 'a;

/// Max relative error of reverse-mode gradients against central differences, over all inputs.
fn fd_op_error(inputs: &[Matrix], build: &Build<'_>, seed: u64) -> rap_core::Result<f64> {
    let eval = |values: &[Matrix], weights: Option<&Matrix>| -> rap_core::Result<(Tape, Vec<Var>, Var, Matrix)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape();
        let w = match weights {
            Some(w) => w.clone(),
            None => Matrix::random_normal(shape.0, shape.1, 1.0, &mut rng(seed)),
        };
        let s = weighted_sum(&mut tape, out, &w);
        Ok((tape, vars, s, w))
    };
    let (tape, vars, s, weights) = eval(inputs, None)?;
    let grads = tape.backward(s)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k])?;
        let mut numeric = Matrix::zeros(input.rows(), input.cols());
        for idx in 0..input.len() {
            let shifted = |delta: f64| -> rap_core::Result<f64> {
                let mut vals = inputs.to_vec();
                vals[k].data_mut()[idx] += delta;
                let (t, _, s, _) = eval(&vals, Some(&weights))?;
                Ok(t.scalar(s))
            };
            let g = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            numeric.data_mut()[idx] = g;
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn with_dense_entry(model: &Model, slot: Slot, idx: usize, delta: f64) -> rap_core::Result<Model> {
    let mut w = model.dense_weights().expect("dense model");
    let target = match slot {
        Slot::Key(l) => &mut w.layers[l].w_k,
        Slot::Value(l) => &mut w.layers[l].w_v,
        other => panic!("{other:?} is not probed"),
    };
    target.data_mut()[idx] += delta;
    Model::from_weights(model.spec.clone(), model.embedding.clone(), w)
}

/// Per-window gradients and the Fisher field against central differences of the window loss.
fn fd_fisher_error() -> rap_core::Result<(f64, f64)> {
    let spec = ModelSpec { layers: 2, q_heads: 2, kv_heads: 1, head_dim: 4, vocab: 6, seed: 3, ..ModelSpec::default() };
    let model = Model::init(&spec)?;
    let calib = CalibrationSet::generate(spec.vocab, 3, 5, 9)?;
    let targets = kv_targets(&model);
    let fisher = estimate_fisher(&model, &calib, &targets)?;
    let mut worst_grad: f64 = 0.0;
    let mut worst_fisher: f64 = 0.0;
    for &slot in &targets {
        let shape = fisher.get(slot).expect("estimated").shape();
        let mut mean_sq = Matrix::zeros(shape.0, shape.1);
        for window in &calib.windows {
            let mut tape = Tape::new();
            let mut leaves = Leaves::new(vec![slot]);
            let loss = loss_ce_on_tape(&model, window, &mut tape, &mut leaves)?;
            let analytic = tape.backward(loss)?.wrt(leaves.var(slot).expect("leaf registered"))?;
            let mut numeric = Matrix::zeros(shape.0, shape.1);
            for idx in 0..numeric.len() {
                let up = loss_ce(&with_dense_entry(&model, slot, idx, FD_STEP)?, window)?;
                let down = loss_ce(&with_dense_entry(&model, slot, idx, -FD_STEP)?, window)?;
                numeric.data_mut()[idx] = (up - down) / (2.0 * FD_STEP);
            }
            worst_grad = worst_grad.max(rel_err(&analytic, &numeric));
            mean_sq.add_assign(&numeric.map(|g| g * g / calib.len() as f64))?;
        }
        worst_fisher = worst_fisher.max(rel_err(fisher.get(slot).expect("estimated"), &mean_sq));
    }
    Ok((worst_grad, worst_fisher))
}

fn c7_gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(7);
    let mut m = |rows, cols| Matrix::random_normal(rows, cols, 1.0, &mut r);
    let scheme = PairingScheme::new(PairingKind::HalfSplit, 6)?;
    let rope = RopeConfig::new(10_000.0, scheme)?;
    let rotation = Arc::new(RotaryTable::new(&rope).rotation(&scheme.layout(), &[0, 5, 17])?);
    let probs = Arc::new(m(3, 5).row_softmax());
    let cases: Vec<(&str, Vec<Matrix>, Box<Build<'_>>)> = vec![
        ("matmul", vec![m(3, 4), m(4, 2)], Box::new(|t, v| t.matmul(v[0], v[1], FlopTag::Other))),
        ("matmul_t", vec![m(3, 4), m(2, 4)], Box::new(|t, v| t.matmul_t(v[0], v[1], FlopTag::Other))),
        ("add", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("scale", vec![m(3, 4)], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("hadamard", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.hadamard(v[0], v[1]))),
        ("row_softmax", vec![m(3, 5)], Box::new(|t, v| t.row_softmax(v[0]))),
        ("causal_softmax", vec![m(3, 5)], Box::new(|t, v| t.causal_softmax(v[0], 1))),
        ("rotate", vec![m(3, 6)], Box::new(move |t, v| t.rotate(v[0], rotation.clone()))),
        ("gather_cols", vec![m(3, 4)], Box::new(|t, v| t.gather_cols(v[0], vec![2, 0, 2]))),
        ("slice_cols", vec![m(3, 4)], Box::new(|t, v| t.slice_cols(v[0], 1, 2))),
        ("gather_rows", vec![m(3, 4)], Box::new(|t, v| t.gather_rows(v[0], vec![1, 1, 0]))),
        ("concat_cols", vec![m(3, 2), m(3, 3)], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![m(2, 3), m(1, 3)], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("cross_entropy", vec![m(3, 5)], Box::new(|t, v| t.cross_entropy(v[0], vec![0, 4, 2]))),
        ("soft_cross_entropy", vec![m(3, 5)], Box::new(move |t, v| t.soft_cross_entropy(v[0], probs.clone()))),
        ("sum", vec![m(3, 4)], Box::new(|t, v| t.sum(v[0]))),
    ];
    let mut v = Verdict::new(true, String::new());
    let mut worst: f64 = 0.0;
    for (i, (name, inputs, build)) in cases.iter().enumerate() {
        let err = fd_op_error(inputs, build.as_ref(), 70 + i as u64)?;
        worst = worst.max(err);
        if err > 1e-4 {
            v.details.push(format!("{name}: relative error {err:.2e}"));
        }
    }
    let (grad_err, fisher_err) = fd_fisher_error()?;
    let secs = start.elapsed().as_secs_f64();
    v.passed = worst <= 1e-4 && grad_err <= 1e-4 && fisher_err <= 1e-4 && secs < 30.0;
    v.summary = format!(
        "{} primitives max rel err {worst:.2e}; model gradients {grad_err:.2e}, Fisher {fisher_err:.2e} \
         (tol 1e-4), {secs:.2} s (limit 30 s)",
        cases.len()
    );
    Ok(v)
}

/// Table with one `(layer, side)` group per entry of `totals`, spread over `heads × pairs`.
fn score_table(totals: &[f64], heads: usize, pairs: usize, r: &mut ChaCha8Rng) -> PairScoreTable {
    let groups = totals
        .iter()
        .enumerate()
        .map(|(i, &total)| {
            let split: Vec<f64> = (0..heads * pairs).map(|_| r.random_range(0.1..1.0)).collect();
            let sum: f64 = split.iter().sum();
            GroupScores {
                layer: i / 2,
                side: if i % 2 == 0 { Side::K } else { Side::V },
                heads: split.chunks(pairs).map(|c| c.iter().map(|s| s * total / sum).collect()).collect(),
            }
        })
        .collect();
    PairScoreTable { head_dim: 2 * pairs, pairing: PairingKind::Adjacent, groups }
}

fn c8_budget() -> Outcome {
    let mut r = rng(8);
    let mut v = Verdict::new(true, String::new());

    let mut sym_dev: f64 = 0.0;
    for n in [2, 3, 4, 7, 12] {
        for sigma in [1.0, 0.37, 2.5e-3, 41.0] {
            let rho = r.random_range(0.0..0.95);
            let mut table = score_table(&vec![1.0; n], 2, 4, &mut r);
            for g in &mut table.groups {
                g.heads.iter_mut().flatten().for_each(|s| *s = sigma);
            }
            let plan = allocate(&table, rho, BudgetMode::Adaptive)?;
            sym_dev = sym_dev.max(plan.groups.iter().map(|g| (g.ratio - rho).abs()).fold(0.0, f64::max));
        }
    }

    let hand = allocate(&score_table(&[3.0, 1.0], 1, 1, &mut r), 0.3, BudgetMode::Adaptive)?;
    let got: Vec<f64> = hand.groups.iter().map(|g| g.ratio).collect();
    let hand_dev = (got[0] - 0.15).abs().max((got[1] - 0.45).abs());

    let mut mean_dev: f64 = 0.0;
    let mut clamped = 0;
    for _ in 0..100 {
        let n = r.random_range(2..=12);
        // Heavy-tailed totals push some raw ratios outside [0, 1].
        let totals: Vec<f64> = (0..n).map(|_| r.random_range(0.0f64..1.0).powi(4) * 100.0 + 1e-3).collect();
        let rho = r.random_range(0.0..0.95);
        let plan = allocate(&score_table(&totals, 2, 4, &mut r), rho, BudgetMode::Adaptive)?;
        if plan.groups.iter().any(|g| !(0.0..=1.0).contains(&g.raw_ratio)) {
            clamped += 1;
        }
        if plan.groups.iter().any(|g| !(0.0..=1.0).contains(&g.ratio)) {
            v.passed = false;
            v.details.push(format!("ratio outside [0, 1] at rho {rho}"));
        }
        mean_dev = mean_dev.max((plan.mean_ratio() - rho).abs());
    }
    v.passed &= sym_dev == 0.0 && hand_dev <= 1e-12 && mean_dev <= 1e-9 && clamped > 0;
    v.summary = format!(
        "uniform-score deviation {sym_dev:e}; sigma=(3,1) at 0.3 gives ({:.15}, {:.15}); \
         100 random tables mean deviation {mean_dev:.1e} (tol 1e-9), {clamped} with clamping",
        got[0], got[1]
    );
    Ok(v)
}

fn c9_greedy() -> Outcome {
    let mut r = rng(9);
    let mut counterexamples = 0;
    let mut checks = 0;
    let mut v = Verdict::new(true, String::new());
    for t in 0..100 {
        let mut scores: Vec<f64> = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
        if t % 4 == 0 {
            // Ties.
            scores[3] = scores[1];
            scores[6] = scores[1];
        }
        for m in 1..=7 {
            let check = check_greedy_optimality(&scores, m)?;
            checks += 1;
            if !check.optimal() {
                counterexamples += 1;
                v.details.push(format!("scores {scores:?} m={m}: witness {:?}", check.witness));
            }
        }
    }
    v.passed = counterexamples == 0;
    v.summary = format!("{counterexamples} counterexamples in {checks} exhaustive comparisons (100 tables, D/2=8)");
    Ok(v)
}

fn c10_loss_bound(fx: &Fixture) -> Outcome {
    let mut r = rng(10);
    let mut quad_dev: f64 = 0.0;
    for t in 0..20 {
        let d = [8, 16][t % 2];
        let g = Matrix::random_normal(6, d, 1.0, &mut r);
        let w0 = Matrix::random_normal(6, d, 1.0, &mut r);
        let kind = if t % 3 == 0 { PairingKind::HalfSplit } else { PairingKind::Adjacent };
        let scheme = PairingScheme::new(kind, d)?;
        let pruned: Vec<usize> = (0..d / 2).filter(|_| r.random_bool(0.5)).chain([t % (d / 2)]).collect();
        let mut pruned = pruned;
        pruned.sort_unstable();
        pruned.dedup();
        for eps in [1.0, 0.5, 0.05] {
            let rep = check_quadratic_bound(&g, &w0, &scheme, &pruned, eps)?;
            quad_dev = quad_dev.max((rep.quadratic_ratio - 1.0).abs());
        }
    }

    const EPS: f64 = 0.05;
    const SLACK: f64 = 1.2;
    let mut v = Verdict::new(true, String::new());
    let mut held = 0;
    for s in 0..20u64 {
        let calib = fx.language.sample(16, 64, 1000 + s)?;
        let pair = lowest_key_pair(&fx.base, &calib)?;
        let rep = check_loss_bound(&fx.base, &calib, std::slice::from_ref(&pair), EPS)?;
        if rep.delta_loss <= SLACK * rep.bound {
            held += 1;
        } else {
            v.details.push(format!(
                "seed {s}: pair (layer {}, head {}, pair {}) dL {:.3e} > 1.2 x bound {:.3e} (ratio {:.2}); \
                 dL(eps)/dL(eps/2) {:.2}, curvature part {:.3e}, Fisher form of the perturbation {:.3e}",
                pair.layer,
                pair.head,
                pair.pair,
                rep.delta_loss,
                rep.bound,
                rep.ratio,
                rep.halving_ratio,
                rep.quadratic_part,
                rep.quadratic_form
            ));
        }
    }
    v.passed = quad_dev <= 1e-9 && held == 20;
    v.summary = format!(
        "synthetic quadratic ratio deviation {quad_dev:.1e} (tol 1e-9); toy LM eps={EPS}: \
         dL <= 1.2 x bound in {held}/20 calibration seeds"
    );
    if held < 20 {
        v.details.push(
            "dL(eps)/dL(eps/2) near 2 means the first-order gradient term dominates; the pretrained base is not \
             at a stationary point of the calibration loss, so a pure second-order bound does not apply"
                .into(),
        );
    }
    Ok(v)
}

fn c11_distillation(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let (_, compressed) = fx.rap(0.3)?;
    let student = &compressed.model;
    let mut v = Verdict::new(true, String::new());
    let mut improved = 0;
    let mut worst_merge: f64 = 0.0;
    let probe = random_tokens(&mut rng(11), 32, fx.spec.vocab);
    for seed in 0..20u64 {
        let cfg = KdConfig { seed, ..KdConfig::default() };
        let out = distill(&fx.base, student, &fx.calib, &cfg)?;
        if out.diverged_at.is_none() && out.final_ce < out.initial_ce {
            improved += 1;
        } else {
            v.details.push(format!("kd seed {seed}: CE {:.4} -> {:.4}", out.initial_ce, out.final_ce));
        }
        let merged = logits(&out.adapters.merge(student)?, &probe)?;
        worst_merge = worst_merge.max(merged.max_abs_diff(&out.adapters.logits(student, &probe)?));
    }
    let secs = start.elapsed().as_secs_f64();
    v.passed = improved >= 19 && worst_merge <= 1e-10 && secs < 120.0;
    v.summary = format!(
        "CE reduced in {improved}/20 runs at rho 0.3 (need 19); merge deviation {worst_merge:.1e} (tol 1e-10), \
         {secs:.1} s (limit 120 s)"
    );
    Ok(v)
}

/// Every artifact of one seeded run, as bytes.
fn pipeline(fx: &Fixture) -> Result<Vec<(String, Vec<u8>)>, Box<dyn std::error::Error>> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut push = |name: &str, bytes: Vec<u8>| out.push((name.to_string(), bytes));
    let (plan, compressed) = fx.rap(0.3)?;
    let kd = KdConfig { seed: SEED, steps: 50, ..KdConfig::default() };
    let outcome = distill(&fx.base, &compressed.model, &fx.calib, &kd)?;
    let distilled = outcome.adapters.merge(&compressed.model)?;

    let dir = tempfile::tempdir()?;
    for (name, model) in [("base", &fx.base), ("compressed", &compressed.model), ("distilled", &distilled)] {
        let header = dir.path().join(format!("{name}.json"));
        save_checkpoint(model, &header)?;
        push(&format!("{name}.json"), std::fs::read(&header)?);
        push(&format!("{name}.bin"), std::fs::read(dir.path().join(format!("{name}.bin")))?);
    }
    push("scores.json", fx.scores.to_json()?.into_bytes());
    push("plan.json", plan.to_json()?.into_bytes());
    push("manifest.json", serde_json::to_vec_pretty(&compressed.manifest())?);
    push("kd_trace.csv", outcome.trace_csv().into_bytes());
    push("adapters.json", outcome.adapters.to_json()?.into_bytes());
    let tokens: Vec<usize> = (0..16).map(|i| (i * 7 + 1) % fx.spec.vocab).collect();
    let rows = sweep(&fx.base, &fx.scores, BudgetMode::Adaptive, &Method::ALL, &RATIOS, &tokens)?;
    push("sweep.csv", sweep_csv(&rows).into_bytes());
    push("sweep.json", sweep_json(&rows)?.into_bytes());
    push("commutativity.json", serde_json::to_vec(&check_commutativity(&compressed.model, 8, SEED)?)?);
    let pair = lowest_key_pair(&fx.base, &fx.calib)?;
    push("bound.json", serde_json::to_vec(&check_loss_bound(&fx.base, &fx.calib, &[pair], 0.05)?)?);
    Ok(out)
}

fn c12_determinism(fx: &Fixture) -> Outcome {
    let first = pipeline(fx)?;
    // The second run rebuilds the base model from scratch.
    let second = pipeline(&Fixture::build()?)?;
    let mut v = Verdict::new(first.len() == second.len(), String::new());
    let mut bytes = 0;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        bytes += a.len();
        if a != b {
            v.passed = false;
            v.details.push(format!("{name} differs"));
        }
    }
    v.summary = format!("{} artifacts ({bytes} bytes) byte-identical across two seed-{SEED} runs", first.len());
    Ok(v)
}

fn report(id: u32, name: &str, outcome: Outcome) -> bool {
    let v = outcome.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
    let tag = if v.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>2} {name}: {}", v.summary);
    for d in &v.details {
        println!("         {d}");
    }
    v.passed
}

fn main() {
    let start = Instant::now();
    let fixture = Fixture::build();
    let mut results: Vec<(u32, bool)> = Vec::new();
    let mut run = |id: u32, name: &str, outcome: Outcome| results.push((id, report(id, name, outcome)));

    run(1, "rope-commutativity", c1_commutativity());
    let no_fixture = || -> Outcome { Err(format!("base model: {}", fixture.as_ref().err().expect("failed")).into()) };
    let fx = fixture.as_ref().ok();
    run(2, "zero-compression", fx.map_or_else(no_fixture, c2_zero_compression));
    run(3, "latent-path", fx.map_or_else(no_fixture, c3_latent_equivalence));
    run(4, "analytic-flops-table", c4_flops_table());
    run(5, "linear-scaling", c5_linear_scaling());
    run(6, "method-ordering", c6_method_ordering());
    run(7, "gradients", c7_gradients());
    run(8, "budget-allocation", c8_budget());
    run(9, "greedy-optimality", c9_greedy());
    run(10, "loss-bound-regime", fx.map_or_else(no_fixture, c10_loss_bound));
    run(11, "distillation", fx.map_or_else(no_fixture, c11_distillation));
    run(12, "determinism", fx.map_or_else(no_fixture, c12_determinism));

    let passed = results.iter().filter(|r| r.1).count();
    let unexpected: Vec<u32> = results.iter().filter(|r| !r.1 && !EXPECTED_RED.contains(&r.0)).map(|r| r.0).collect();
    let red: Vec<u32> = results.iter().filter(|r| !r.1 && EXPECTED_RED.contains(&r.0)).map(|r| r.0).collect();
    println!(
        "{passed}/{} criteria pass; expected red: {red:?}; unexpected failures: {unexpected:?} ({:.1} s)",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
