//! Accuracy recovery for compressed models: low-rank adapters on the query,
//! key, value and output projections, trained against the uncompressed
//! teacher with a cross-entropy plus temperature-scaled KL objective, then
//! merged back into the base weights.
//!
//! `loss = α_CE·CE(student, labels) + α_KD·KL(softmax(t/T) ‖ softmax(s/T))`

use std::fmt::Write as _;
use std::sync::Arc;

use rand::distr::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{log_sum_exp, FlopTag, Matrix, Tape, Var};
use crate::toymodel::{forward, mean_loss, CalibrationSet, KvCache, Model, Slot, WeightSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub alpha_ce: f64,
    pub alpha_kd: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Windows per step; 0 uses the whole calibration set.
    pub batch_size: usize,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha_ce: 0.4,
            alpha_kd: 0.6,
            temperature: 2.0,
            learning_rate: 0.05,
            steps: 200,
            batch_size: 4,
            seed: 42,
            lora_rank: 1,
            lora_alpha: 2.0,
            dropout: 0.05,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_ce >= 0.0 && self.alpha_kd >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be non-negative"));
        }
        if self.lora_rank == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("adapter rank must be positive and dropout in [0, 1)"));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Cross-entropy, KL and weighted total, each averaged over positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdTerms {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

fn tempered_probs(logits: &Matrix, t: f64) -> Matrix {
    logits.scale(1.0 / t).row_softmax()
}

/// Mean entropy of the rows of a probability matrix.
fn mean_entropy(p: &Matrix) -> f64 {
    let total: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
    total / p.rows() as f64
}

pub fn kd_loss(teacher: &Matrix, student: &Matrix, labels: &[usize], cfg: &KdConfig) -> Result<KdTerms> {
    if teacher.shape() != student.shape() || labels.len() != student.rows() || student.rows() == 0 {
        return Err(Error::DimensionMismatch { op: "kd_loss", left: teacher.shape(), right: student.shape() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= student.cols()) {
        return Err(Error::TokenOutOfVocab { token: bad, vocab: student.cols() });
    }
    let n = student.rows() as f64;
    let ce: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| log_sum_exp(student.row(r)) - student.get(r, l))
        .sum::<f64>()
        / n;
    let t = cfg.temperature;
    let pt = tempered_probs(teacher, t);
    let s = student.scale(1.0 / t);
    let mut kd = 0.0;
    for r in 0..student.rows() {
        let lse_s = log_sum_exp(s.row(r));
        for (c, &p) in pt.row(r).iter().enumerate() {
            if p > 0.0 {
                kd += p * (p.ln() - (s.get(r, c) - lse_s));
            }
        }
    }
    let kd = kd / n;
    Ok(KdTerms { ce, kd, total: cfg.alpha_ce * ce + cfg.alpha_kd * kd })
}

/// `W' = W + scaling · down · up`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub slot: Slot,
    /// `d_in × r`
    pub down: Matrix,
    /// `r × d_out`
    pub up: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub scaling: f64,
    pub dropout: f64,
    pub adapters: Vec<LoraAdapter>,
}

fn adapted_matrix(model: &Model, slot: Slot) -> Result<&Matrix> {
    let layer = |l: usize| {
        model
            .layers
            .get(l)
            .ok_or_else(|| invalid(format!("adapter slot {slot:?} outside the model")))
    };
    match slot {
        Slot::Query(l) => Ok(layer(l)?.key.query_matrix()),
        Slot::Key(l) => Ok(layer(l)?.key.key_matrix()),
        Slot::Value(l) => Ok(layer(l)?.value.value_matrix()),
        Slot::Output(l) => Ok(layer(l)?.value.output_matrix()),
        other => Err(invalid(format!("{other:?} cannot carry an adapter"))),
    }
}

fn adapted_matrix_mut(model: &mut Model, slot: Slot) -> Result<&mut Matrix> {
    let err = || invalid(format!("adapter slot {slot:?} outside the model"));
    match slot {
        Slot::Query(l) => Ok(model.layers.get_mut(l).ok_or_else(err)?.key.matrices_mut().0),
        Slot::Key(l) => Ok(model.layers.get_mut(l).ok_or_else(err)?.key.matrices_mut().1),
        Slot::Value(l) => Ok(model.layers.get_mut(l).ok_or_else(err)?.value.matrices_mut().0),
        Slot::Output(l) => Ok(model.layers.get_mut(l).ok_or_else(err)?.value.matrices_mut().1),
        other => Err(invalid(format!("{other:?} cannot carry an adapter"))),
    }
}

impl LoraSet {
    /// Adapters on Q, K, V and O of every layer; `down` random, `up` zero.
    pub fn attach(model: &Model, cfg: &KdConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adapters = Vec::new();
        for l in 0..model.layers.len() {
            for slot in [Slot::Query(l), Slot::Key(l), Slot::Value(l), Slot::Output(l)] {
                let w = adapted_matrix(model, slot)?;
                if cfg.lora_rank >= w.rows().min(w.cols()) {
                    return Err(invalid(format!("adapter rank {} too large for {slot:?}", cfg.lora_rank)));
                }
                let down = Matrix::random_normal(w.rows(), cfg.lora_rank, 1.0 / (w.rows() as f64).sqrt(), &mut rng);
                adapters.push(LoraAdapter { slot, down, up: Matrix::zeros(cfg.lora_rank, w.cols()) });
            }
        }
        Ok(Self { scaling: cfg.scaling(), dropout: cfg.dropout, adapters })
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.down.len() + a.up.len()).sum()
    }

    /// Folds every adapter into its base matrix.
    pub fn merge(&self, model: &Model) -> Result<Model> {
        let mut out = model.clone();
        for a in &self.adapters {
            let w = adapted_matrix_mut(&mut out, a.slot)?;
            if a.down.rows() != w.rows() || a.up.cols() != w.cols() || a.down.cols() != a.up.rows() {
                return Err(Error::DimensionMismatch {
                    op: "merge",
                    left: w.shape(),
                    right: (a.down.rows(), a.up.cols()),
                });
            }
            w.add_assign(&a.down.matmul(&a.up)?.scale(self.scaling))?;
        }
        Ok(out)
    }

    /// Evaluation-mode logits with the adapters as a side branch.
    pub fn logits(&self, model: &Model, tokens: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut src = AdapterSource::eval(self);
        let out = forward(model, &mut KvCache::new(model), tokens, &mut tape, &mut src)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct AdapterSource<'a> {
    set: &'a LoraSet,
    train: Option<ChaCha8Rng>,
    /// `(down, up)` leaves per adapter, when training.
    leaves: Vec<Option<(Var, Var)>>,
}

impl<'a> AdapterSource<'a> {
    fn eval(set: &'a LoraSet) -> Self {
        Self { set, train: None, leaves: vec![None; set.adapters.len()] }
    }

    fn train(set: &'a LoraSet, rng: ChaCha8Rng) -> Self {
        Self { set, train: Some(rng), leaves: vec![None; set.adapters.len()] }
    }
}

impl WeightSource for AdapterSource<'_> {
    fn adapt(&mut self, tape: &mut Tape, slot: Slot, x: Var, y: Var) -> Result<Var> {
        let Some(i) = self.set.adapters.iter().position(|a| a.slot == slot) else {
            return Ok(y);
        };
        let a = &self.set.adapters[i];
        let (x, down, up) = match &mut self.train {
            Some(rng) => {
                let x = if self.set.dropout > 0.0 {
                    let keep = Bernoulli::new(1.0 - self.set.dropout).expect("dropout in [0, 1)");
                    let (r, c) = tape.value(x).shape();
                    let inv = 1.0 / (1.0 - self.set.dropout);
                    let mask = Matrix::from_fn(r, c, |_, _| if keep.sample(rng) { inv } else { 0.0 });
                    let m = tape.constant(mask);
                    tape.hadamard(x, m)?
                } else {
                    x
                };
                let down = tape.leaf(a.down.clone());
                let up = tape.leaf(a.up.clone());
                self.leaves[i] = Some((down, up));
                (x, down, up)
            }
            None => (x, tape.constant(a.down.clone()), tape.constant(a.up.clone())),
        };
        let h = tape.matmul(x, down, FlopTag::Adapter)?;
        let z = tape.matmul(h, up, FlopTag::Adapter)?;
        let z = tape.scale(z, self.set.scaling)?;
        tape.add(y, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub adapters: LoraSet,
    /// Training-batch losses before each update.
    pub trace: Vec<TraceRow>,
    /// Step at which a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
    pub initial_ce: f64,
    pub final_ce: f64,
    /// Adapter parameters over the teacher's parameters.
    pub adapter_ratio: f64,
}

impl DistillOutcome {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,ce,kd,total\n");
        for r in &self.trace {
            let _ = writeln!(out, "{},{:.12},{:.12},{:.12}", r.step, r.ce, r.kd, r.total);
        }
        out
    }
}

struct WindowGrad {
    terms: KdTerms,
    grads: Vec<(Matrix, Matrix)>,
}

fn window_step(
    teacher: &Model,
    student: &Model,
    set: &LoraSet,
    window: &[usize],
    cfg: &KdConfig,
    rng: ChaCha8Rng,
) -> Result<WindowGrad> {
    let (inputs, labels) = (&window[..window.len() - 1], &window[1..]);
    let teacher_logits = {
        let mut tape = Tape::new();
        let out = forward(teacher, &mut KvCache::new(teacher), inputs, &mut tape, &mut crate::toymodel::Frozen)?;
        tape.value(out).clone()
    };
    let pt = tempered_probs(&teacher_logits, cfg.temperature);
    let entropy = mean_entropy(&pt);

    let mut tape = Tape::new();
    let mut src = AdapterSource::train(set, rng);
    let logits = forward(student, &mut KvCache::new(student), inputs, &mut tape, &mut src)?;
    let ce = tape.cross_entropy(logits, labels.to_vec())?;
    let tempered = tape.scale(logits, 1.0 / cfg.temperature)?;
    let soft = tape.soft_cross_entropy(tempered, Arc::new(pt))?;
    let a = tape.scale(ce, cfg.alpha_ce)?;
    let b = tape.scale(soft, cfg.alpha_kd)?;
    let total = tape.add(a, b)?;

    let ce_v = tape.scalar(ce);
    let kd_v = tape.scalar(soft) - entropy;
    let terms = KdTerms { ce: ce_v, kd: kd_v, total: cfg.alpha_ce * ce_v + cfg.alpha_kd * kd_v };
    if !terms.total.is_finite() {
        return Ok(WindowGrad { terms, grads: Vec::new() });
    }
    let g = tape.backward(total)?;
    let grads = src
        .leaves
        .iter()
        .map(|l| {
            let (d, u) = l.ok_or_else(|| invalid("adapter slot not reached by the forward pass"))?;
            Ok((g.wrt(d)?, g.wrt(u)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowGrad { terms, grads })
}

/// Trains adapters on `student` toward `teacher` with plain SGD; base weights stay frozen.
pub fn distill(teacher: &Model, student: &Model, calib: &CalibrationSet, cfg: &KdConfig) -> Result<DistillOutcome> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(invalid("empty calibration set"));
    }
    if teacher.spec.vocab != student.spec.vocab {
        return Err(invalid("teacher and student vocabularies differ"));
    }
    let mut set = LoraSet::attach(student, cfg)?;
    let initial_ce = mean_loss(student, &calib.windows)?;
    let n = calib.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    for step in 0..cfg.steps {
        let start = (step * batch) % n;
        let windows: Vec<&Vec<usize>> = (0..batch).map(|i| &calib.windows[(start + i) % n]).collect();
        let rngs: Vec<ChaCha8Rng> = (0..batch).map(|_| ChaCha8Rng::from_rng(&mut seeds)).collect();
        let results = windows
            .par_iter()
            .zip(rngs)
            .map(|(w, rng)| window_step(teacher, student, &set, w, cfg, rng))
            .collect::<Result<Vec<_>>>()?;

        let mean = |f: fn(&KdTerms) -> f64| results.iter().map(|r| f(&r.terms)).sum::<f64>() / batch as f64;
        let row = TraceRow { step, ce: mean(|t| t.ce), kd: mean(|t| t.kd), total: mean(|t| t.total) };
        trace.push(row);
        if !row.total.is_finite() {
            diverged_at = Some(step);
            break;
        }
        // Ordered reduction, then one SGD step on every adapter.
        let lr = cfg.learning_rate / batch as f64;
        for (i, a) in set.adapters.iter_mut().enumerate() {
            for r in &results {
                let (gd, gu) = &r.grads[i];
                a.down.add_assign(&gd.scale(-lr))?;
                a.up.add_assign(&gu.scale(-lr))?;
            }
        }
        if set.adapters.iter().any(|a| !a.down.is_finite() || !a.up.is_finite()) {
            diverged_at = Some(step);
            break;
        }
    }
    let final_ce = if diverged_at.is_some() { f64::NAN } else { mean_loss(&set.merge(student)?, &calib.windows)? };
    let adapter_ratio = set.parameter_count() as f64 / teacher.parameter_count() as f64;
    Ok(DistillOutcome { adapters: set, trace, diverged_at, initial_ce, final_ce, adapter_ratio })
}
