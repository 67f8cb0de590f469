//! Subcommands. Each one computes everything in memory and writes its
//! artifacts only after every step has succeeded.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rap_core::analyze::{analytic_kv_projection, sweep, sweep_csv, sweep_json};
use rap_core::budget::{allocate, BudgetPlan};
use rap_core::factorize::{build_compressed, CompressedModel, Method};
use rap_core::numcore::Matrix;
use rap_core::recover::distill;
use rap_core::rope::PairingScheme;
use rap_core::scoring::{fisher_scores, magnitude_scores, PairScoreTable, Side};
use rap_core::toymodel::{
    base_model, load_checkpoint, logits, mean_loss, save_checkpoint, CalibrationSet, MarkovLanguage, Model,
};
use rap_core::verify::{
    check_commutativity, check_greedy_optimality, check_loss_bound, check_quadratic_bound, lowest_key_pair,
    CheckOutcome, VerifySummary,
};
use serde::Serialize;

use crate::config::{RunConfig, Scoring};

/// A check failed (exit status 2).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Training stopped on a non-finite value (exit status 3).
#[derive(Debug)]
pub struct Diverged(pub String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "numeric divergence: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

const BASE: &str = "base.json";
const SCORES: &str = "scores.json";
const COMPRESSED: &str = "compressed.json";

enum Content {
    Text(String),
    Checkpoint(Model),
}

/// Pending outputs, written together at the end of a command.
#[derive(Default)]
struct Artifacts(Vec<(PathBuf, Content)>);

impl Artifacts {
    fn json(&mut self, cfg: &RunConfig, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.0.push((cfg.artifact(name), Content::Text(text)));
        Ok(())
    }

    fn text(&mut self, cfg: &RunConfig, name: &str, text: String) {
        self.0.push((cfg.artifact(name), Content::Text(text)));
    }

    fn checkpoint(&mut self, cfg: &RunConfig, name: &str, model: Model) {
        self.0.push((cfg.artifact(name), Content::Checkpoint(model)));
    }

    fn write(self, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        let mut written = Vec::new();
        for (path, content) in self.0 {
            match content {
                Content::Text(t) => std::fs::write(&path, t).with_context(|| format!("writing {}", path.display()))?,
                Content::Checkpoint(m) => {
                    save_checkpoint(&m, &path)?;
                }
            }
            written.push(path);
        }
        Ok(written)
    }
}

fn calibration(cfg: &RunConfig) -> Result<CalibrationSet> {
    let lang = MarkovLanguage::new(cfg.spec.vocab, cfg.spec.seed)?;
    Ok(lang.sample(cfg.calibration.count, cfg.calibration.window_len, cfg.seed)?)
}

fn load_base(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.artifact(BASE);
    if !path.is_file() {
        bail!("{} not found; run `raplab score` first", path.display());
    }
    Ok(load_checkpoint(&path)?)
}

fn load_scores(cfg: &RunConfig) -> Result<PairScoreTable> {
    let path = cfg.artifact(SCORES);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("{} not found; run `raplab score` first", path.display()))?;
    Ok(PairScoreTable::from_json(&text)?)
}

fn plan_and_compress(cfg: &RunConfig, base: &Model, scores: &PairScoreTable) -> Result<(BudgetPlan, CompressedModel)> {
    let plan = allocate(scores, cfg.rho, cfg.budget)?;
    let compressed = build_compressed(base, cfg.method, cfg.rho, Some(scores), Some(&plan))?;
    Ok((plan, compressed))
}

/// Pair order (descending score, ties to the lower index) of one head.
fn argsort(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Serialize)]
struct GroupSummary {
    layer: usize,
    side: Side,
    total: f64,
    order: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct HeadRef {
    layer: usize,
    side: Side,
    head: usize,
}

#[derive(Serialize)]
struct ScoreSummary {
    scoring: Scoring,
    seed: u64,
    calibration_windows: usize,
    window_len: usize,
    base_ce: f64,
    total: f64,
    groups: Vec<GroupSummary>,
    /// Heads whose Fisher pair order differs from the magnitude order (Fisher runs only).
    differs_from_magnitude: Option<Vec<HeadRef>>,
}

pub fn score(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let base = match &cfg.model {
        Some(path) => {
            let m = load_checkpoint(path)?;
            if !m.is_dense() {
                bail!("{} is not a dense model", path.display());
            }
            m
        }
        None => base_model(&cfg.spec, &cfg.pretrain)?,
    };
    let calib = calibration(cfg)?;
    let magnitude = magnitude_scores(&base)?;
    let scores = match cfg.scoring {
        Scoring::Fisher => fisher_scores(&base, &calib)?,
        Scoring::Magnitude => magnitude.clone(),
    };
    let differs = (cfg.scoring == Scoring::Fisher).then(|| {
        let mut out = Vec::new();
        for (f, m) in scores.groups.iter().zip(&magnitude.groups) {
            for (head, (fh, mh)) in f.heads.iter().zip(&m.heads).enumerate() {
                if argsort(fh) != argsort(mh) {
                    out.push(HeadRef { layer: f.layer, side: f.side, head });
                }
            }
        }
        out
    });
    let summary = ScoreSummary {
        scoring: cfg.scoring,
        seed: cfg.seed,
        calibration_windows: calib.len(),
        window_len: calib.window_len,
        base_ce: mean_loss(&base, &calib.windows)?,
        total: scores.total(),
        groups: scores
            .groups
            .iter()
            .map(|g| GroupSummary {
                layer: g.layer,
                side: g.side,
                total: g.total(),
                order: g.heads.iter().map(|h| argsort(h)).collect(),
            })
            .collect(),
        differs_from_magnitude: differs,
    };
    let mut out = Artifacts::default();
    out.checkpoint(cfg, BASE, base);
    out.text(cfg, SCORES, scores.to_json()? + "\n");
    out.json(cfg, "score_summary.json", &summary)?;
    out.write(cfg)
}

pub fn prune(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let base = load_base(cfg)?;
    let scores = load_scores(cfg)?;
    let (plan, compressed) = plan_and_compress(cfg, &base, &scores)?;
    let mut out = Artifacts::default();
    out.text(cfg, "plan.json", plan.to_json()? + "\n");
    out.json(cfg, "manifest.json", &compressed.manifest())?;
    out.checkpoint(cfg, COMPRESSED, compressed.model);
    out.write(cfg)
}

#[derive(Serialize)]
struct DistillSummary {
    steps: usize,
    diverged_at: Option<usize>,
    teacher_ce: f64,
    initial_ce: f64,
    final_ce: f64,
    adapter_parameters: usize,
    adapter_ratio: f64,
}

pub fn distill_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let teacher = load_base(cfg)?;
    let path = cfg.artifact(COMPRESSED);
    if !path.is_file() {
        bail!("{} not found; run `raplab prune` first", path.display());
    }
    let student = load_checkpoint(&path)?;
    let calib = calibration(cfg)?;
    let outcome = distill(&teacher, &student, &calib, &cfg.kd)?;
    let summary = DistillSummary {
        steps: cfg.kd.steps,
        diverged_at: outcome.diverged_at,
        teacher_ce: mean_loss(&teacher, &calib.windows)?,
        initial_ce: outcome.initial_ce,
        final_ce: outcome.final_ce,
        adapter_parameters: outcome.adapters.parameter_count(),
        adapter_ratio: outcome.adapter_ratio,
    };
    let mut out = Artifacts::default();
    out.text(cfg, "kd_trace.csv", outcome.trace_csv());
    out.json(cfg, "distill_summary.json", &summary)?;
    if let Some(step) = outcome.diverged_at {
        out.write(cfg)?;
        return Err(Diverged(format!("distillation diverged at step {step}")).into());
    }
    out.text(cfg, "adapters.json", outcome.adapters.to_json()? + "\n");
    out.checkpoint(cfg, "distilled.json", outcome.adapters.merge(&student)?);
    out.write(cfg)
}

/// Prefill tokens used for resource measurement.
fn probe_tokens(cfg: &RunConfig) -> Vec<usize> {
    (0..16).map(|i| (i * 7 + 1) % cfg.spec.vocab).collect()
}

pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let base = load_base(cfg)?;
    let scores = load_scores(cfg)?;
    let rows = sweep(&base, &scores, cfg.budget, &[cfg.method], &cfg.ratios, &probe_tokens(cfg))?;
    // Closed forms for a 32-head, 128-dim layer at one token.
    let mut analytic = String::from("method,rho,cache,params,flops\n");
    for method in Method::ALL {
        for &rho in &cfg.ratios {
            let r = analytic_kv_projection(method, 1.0 - rho, 32, 128, 1)?;
            analytic.push_str(&format!("{method},{rho:.6},{:.6},{:.6},{:.6}\n", r.cache, r.params, r.flops));
        }
    }
    let mut out = Artifacts::default();
    out.text(cfg, "report.csv", sweep_csv(&rows));
    out.text(cfg, "report.json", sweep_json(&rows)? + "\n");
    out.text(cfg, "analytic.csv", analytic);
    out.write(cfg)
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let base = load_base(cfg)?;
    let scores = load_scores(cfg)?;
    let rows = sweep(&base, &scores, cfg.budget, &Method::ALL, &cfg.ratios, &probe_tokens(cfg))?;
    let mut out = Artifacts::default();
    out.text(cfg, "sweep.csv", sweep_csv(&rows));
    out.text(cfg, "sweep.json", sweep_json(&rows)? + "\n");
    out.write(cfg)
}

fn outcome(name: &str, deviation: f64, tolerance: f64, passed: bool, gating: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.to_string(), passed, deviation, tolerance, gating, detail }
}

const EPSILON: f64 = 0.05;
const BOUND_SLACK: f64 = 1.2;

/// Returns the written paths and whether every gating check passed.
pub fn verify_cmd(cfg: &RunConfig) -> Result<(Vec<PathBuf>, bool)> {
    let base = load_base(cfg)?;
    let scores = load_scores(cfg)?;
    let path = cfg.artifact(COMPRESSED);
    if !path.is_file() {
        bail!("{} not found; run `raplab prune` first", path.display());
    }
    let installed = load_checkpoint(&path)?;
    let (plan, rebuilt) = plan_and_compress(cfg, &base, &scores)?;
    let calib = calibration(cfg)?;
    let windows = &calib.windows[..calib.len().min(4)];
    let mut checks = Vec::new();

    let mut dev = 0.0f64;
    for w in windows {
        dev = dev.max(logits(&installed, w)?.max_abs_diff(&logits(&rebuilt.model, w)?));
    }
    checks.push(outcome(
        "checkpoint-matches-rebuild",
        dev,
        0.0,
        installed == rebuilt.model,
        true,
        format!("{} at rho {}", cfg.method, cfg.rho),
    ));

    let reference = rebuilt.reference_model()?;
    let mut dev = 0.0f64;
    for w in windows {
        dev = dev.max(logits(&installed, w)?.max_abs_diff(&logits(&reference, w)?));
    }
    checks.push(outcome("latent-equivalence", dev, 1e-9, dev <= 1e-9, true, "latent cache vs reconstructed weights".into()));

    if cfg.method == Method::Rap {
        let c = check_commutativity(&installed, 10, cfg.seed)?;
        let detail = format!("{} heads x {} trials", c.heads, c.trials);
        checks.push(outcome("rope-commutativity", c.max_deviation, 1e-12, c.max_deviation <= 1e-12, true, detail));
    }

    let mut worst_gap = 0.0f64;
    let mut witnesses = 0;
    let mut cases = 0;
    for g in &scores.groups {
        let m = plan.group(g.layer, g.side).context("plan misses a score group")?.retained_pairs;
        for head in &g.heads {
            let c = check_greedy_optimality(head, m)?;
            worst_gap = worst_gap.max(c.greedy_residual - c.best_residual);
            witnesses += usize::from(!c.optimal());
            cases += 1;
        }
    }
    checks.push(outcome(
        "greedy-optimality",
        worst_gap,
        0.0,
        witnesses == 0,
        true,
        format!("{cases} heads enumerated, {witnesses} counterexamples"),
    ));

    let d = cfg.spec.head_dim;
    let scheme = PairingScheme::new(cfg.spec.pairing, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = Matrix::random_normal(6, d, 1.0, &mut rng);
    let w0 = Matrix::random_normal(6, d, 1.0, &mut rng);
    let q = check_quadratic_bound(&g, &w0, &scheme, &[0], EPSILON)?;
    let dev = (q.quadratic_ratio - 1.0).abs();
    checks.push(outcome(
        "loss-bound-quadratic",
        dev,
        1e-9,
        dev <= 1e-9,
        true,
        format!("delta {:.6e}, quadratic form {:.6e}", q.delta_loss, q.quadratic_form),
    ));

    let kp = lowest_key_pair(&base, &calib)?;
    let b = check_loss_bound(&base, &calib, &[kp], EPSILON)?;
    checks.push(outcome(
        "loss-bound-model",
        b.ratio,
        BOUND_SLACK,
        b.ratio <= BOUND_SLACK,
        false,
        format!(
            "eps {EPSILON}, pair {:?}: delta {:.6e}, bound {:.6e}, halving ratio {:.3}, quadratic part {:.6e}",
            (kp.layer, kp.head, kp.pair),
            b.delta_loss,
            b.bound,
            b.halving_ratio,
            b.quadratic_part
        ),
    ));

    let summary = VerifySummary::new(checks);
    let passed = summary.passed;
    let mut out = Artifacts::default();
    out.json(cfg, "verify.json", &summary)?;
    Ok((out.write(cfg)?, passed))
}
