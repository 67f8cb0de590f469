//! Per-group compression ratios. A group is one (layer, K|V) projection; every
//! kv head in a group keeps the same number of pairs.
//!
//! Adaptive mode gives low-scoring groups more compression:
//! `ρ̃ = ρ·(1 − σ_g/SC)/(1 − 1/N)`, then clamps to `[0, 1]` and shifts the
//! unclamped groups until the mean is back at `ρ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::factorize::{mask_pairs, select_pairs};
use crate::scoring::{PairScoreTable, Side};
use crate::toymodel::{mean_loss, CalibrationSet, Model};

const MEAN_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    Adaptive,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBudget {
    pub layer: usize,
    pub side: Side,
    pub score: f64,
    /// Before clamping and projection.
    pub raw_ratio: f64,
    pub ratio: f64,
    pub retained_pairs: usize,
    /// `1 − m/(D/2)` after rounding.
    pub realized_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub rho: f64,
    pub mode: BudgetMode,
    pub head_dim: usize,
    pub groups: Vec<GroupBudget>,
}

impl BudgetPlan {
    pub fn group(&self, layer: usize, side: Side) -> Option<&GroupBudget> {
        self.groups.iter().find(|g| g.layer == layer && g.side == side)
    }

    pub fn mean_ratio(&self) -> f64 {
        self.groups.iter().map(|g| g.ratio).sum::<f64>() / self.groups.len() as f64
    }

    pub fn realized_mean(&self) -> f64 {
        self.groups.iter().map(|g| g.realized_ratio).sum::<f64>() / self.groups.len() as f64
    }

    /// Realized minus requested mean ratio, caused by integer pair counts.
    pub fn rounding_error(&self) -> f64 {
        self.realized_mean() - self.rho
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        let half = plan.head_dim / 2;
        if plan.groups.iter().any(|g| g.retained_pairs == 0 || g.retained_pairs > half) {
            return Err(invalid("retained pair counts must lie in 1..=D/2"));
        }
        Ok(plan)
    }
}

/// `m = max(1, round((1 − ratio)·D/2))`
pub fn retained_pairs(ratio: f64, head_dim: usize) -> usize {
    let half = head_dim / 2;
    (((1.0 - ratio) * half as f64).round() as usize).clamp(1, half)
}

/// Clamps to `[0, 1]` and moves the groups that can still move until the mean is `rho`.
pub fn project_to_mean(raw: &[f64], rho: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(invalid("no groups to project"));
    }
    let n = raw.len() as f64;
    let mut x: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    for _ in 0..MAX_ITERS {
        let mean = x.iter().sum::<f64>() / n;
        let gap = rho - mean;
        if gap.abs() <= MEAN_TOL {
            return Ok(x);
        }
        let movable: Vec<usize> = (0..x.len())
            .filter(|&i| if gap > 0.0 { x[i] < 1.0 } else { x[i] > 0.0 })
            .collect();
        if movable.is_empty() {
            break;
        }
        let shift = gap * n / movable.len() as f64;
        for i in movable {
            x[i] = (x[i] + shift).clamp(0.0, 1.0);
        }
    }
    Err(Error::InfeasibleBudget(format!("cannot reach mean ratio {rho} within [0, 1]")))
}

pub fn allocate(scores: &PairScoreTable, rho: f64, mode: BudgetMode) -> Result<BudgetPlan> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid(format!("compression ratio {rho} must lie in [0, 1)")));
    }
    let n = scores.groups.len();
    if n == 0 {
        return Err(invalid("score table has no groups"));
    }
    let group_scores: Vec<f64> = scores.groups.iter().map(|g| g.total()).collect();
    let (raw, ratios) = match mode {
        BudgetMode::Uniform => (vec![rho; n], vec![rho; n]),
        BudgetMode::Adaptive => {
            if n == 1 {
                return Err(invalid("adaptive budgeting needs at least two groups; use uniform mode"));
            }
            let sc: f64 = group_scores.iter().sum();
            if !(sc > 0.0 && sc.is_finite()) {
                return Err(invalid("total score must be positive and finite"));
            }
            let norm = 1.0 - 1.0 / n as f64;
            let raw: Vec<f64> = if group_scores.iter().all(|s| *s == group_scores[0]) {
                // Equal scores reduce the formula to rho; skip the rounding.
                vec![rho; n]
            } else {
                group_scores.iter().map(|s| rho * ((1.0 - s / sc) / norm)).collect()
            };
            let ratios = project_to_mean(&raw, rho)?;
            (raw, ratios)
        }
    };
    let half = scores.head_dim / 2;
    let groups = scores
        .groups
        .iter()
        .zip(group_scores)
        .zip(raw.into_iter().zip(ratios))
        .map(|((g, score), (raw_ratio, ratio))| {
            let m = retained_pairs(ratio, scores.head_dim);
            GroupBudget {
                layer: g.layer,
                side: g.side,
                score,
                raw_ratio,
                ratio,
                retained_pairs: m,
                realized_ratio: 1.0 - m as f64 / half as f64,
            }
        })
        .collect();
    Ok(BudgetPlan { rho, mode, head_dim: scores.head_dim, groups })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSensitivity {
    pub layer: usize,
    pub side: Side,
    pub loss: f64,
    /// Loss increase over the unpruned model.
    pub delta: f64,
}

/// Prunes one group at a time (lowest-scoring pairs, `probe` ratio) and reports the calibration loss change.
pub fn sensitivity_scan(
    model: &Model,
    calib: &CalibrationSet,
    scores: &PairScoreTable,
    probe: f64,
) -> Result<Vec<GroupSensitivity>> {
    if !(0.0..=1.0).contains(&probe) {
        return Err(invalid("probe ratio must lie in [0, 1]"));
    }
    let base = mean_loss(model, &calib.windows)?;
    let half = scores.head_dim / 2;
    // A zero probe keeps every pair.
    let m = if probe == 0.0 { half } else { retained_pairs(probe, scores.head_dim) };
    scores
        .groups
        .par_iter()
        .map(|g| {
            let keep = g
                .heads
                .iter()
                .map(|h| select_pairs(h, m, &scores.scheme(g.side)?))
                .collect::<Result<Vec<_>>>()?;
            let pruned = mask_pairs(model, g.layer, g.side, &keep)?;
            let loss = mean_loss(&pruned, &calib.windows)?;
            Ok(GroupSensitivity { layer: g.layer, side: g.side, loss, delta: loss - base })
        })
        .collect()
}
