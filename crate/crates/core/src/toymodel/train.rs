use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{Matrix, Tape};
use crate::toymodel::{loss_ce_on_tape, CalibrationSet, KeyProjection, Leaves, MarkovLanguage, Model, Slot, ValueProjection};

/// Full-weight SGD on next-token cross-entropy over the model's Markov language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub window_len: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub max_grad_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1200, learning_rate: 0.5, batch_size: 8, window_len: 32, seed: 7, max_grad_norm: 1.0 }
    }
}

fn trainable_slots(model: &Model) -> Vec<Slot> {
    let mut slots = vec![Slot::Embedding];
    for l in 0..model.layers.len() {
        slots.extend([Slot::Query(l), Slot::Key(l), Slot::Value(l), Slot::Output(l)]);
    }
    slots
}

fn apply(model: &mut Model, slot: Slot, step: &Matrix) -> Result<()> {
    let target = match slot {
        Slot::Embedding => &mut model.embedding,
        Slot::Query(l) => model.layers[l].key.matrices_mut().0,
        Slot::Key(l) => model.layers[l].key.matrices_mut().1,
        Slot::Value(l) => model.layers[l].value.matrices_mut().0,
        Slot::Output(l) => model.layers[l].value.matrices_mut().1,
        other => return Err(invalid(format!("{other:?} is not trained"))),
    };
    target.add_assign(step)
}

/// Returns the trained model and the mean batch loss of every step.
pub fn pretrain(model: &Model, language: &MarkovLanguage, cfg: &PretrainConfig) -> Result<(Model, Vec<f64>)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) || !(cfg.max_grad_norm > 0.0) {
        return Err(invalid("pretraining needs a positive batch and a non-negative learning rate"));
    }
    let dense = model
        .layers
        .iter()
        .all(|l| matches!((&l.key, &l.value), (KeyProjection::Dense { .. }, ValueProjection::Dense { .. })));
    if !dense {
        return Err(invalid("pretraining expects a dense model"));
    }
    let slots = trainable_slots(model);
    let mut model = model.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: CalibrationSet =
            language.sample(cfg.batch_size, cfg.window_len, cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64))?;
        let results = batch
            .windows
            .par_iter()
            .map(|w| {
                let mut tape = Tape::new();
                let mut src = Leaves::new(slots.clone());
                let loss = loss_ce_on_tape(&model, w, &mut tape, &mut src)?;
                let g = tape.backward(loss)?;
                let grads = slots
                    .iter()
                    .map(|&s| g.wrt(src.var(s).expect("every slot is used")))
                    .collect::<Result<Vec<_>>>()?;
                Ok((tape.scalar(loss), grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        losses.push(loss);
        // Ordered reduction of the batch-mean gradient.
        let n = results.len() as f64;
        let mut grads: Vec<Matrix> = results[0].1.iter().map(|g| g.scale(1.0 / n)).collect();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.1) {
                acc.add_assign(&g.scale(1.0 / n))?;
            }
        }
        let norm = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        let clip = if norm > cfg.max_grad_norm { cfg.max_grad_norm / norm } else { 1.0 };
        for (&slot, g) in slots.iter().zip(&grads) {
            apply(&mut model, slot, &g.scale(-cfg.learning_rate * clip))?;
        }
    }
    Ok((model, losses))
}

/// Randomly initialized model trained on its own Markov language (seeded by `spec.seed`).
pub fn base_model(spec: &crate::toymodel::ModelSpec, cfg: &PretrainConfig) -> Result<Model> {
    let language = MarkovLanguage::new(spec.vocab, spec.seed)?;
    Ok(pretrain(&Model::init(spec)?, &language, cfg)?.0)
}
