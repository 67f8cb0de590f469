//! Resource accounting for computing the KV cache.
//!
//! The closed forms describe a single kv head whose input is `H·D` wide, with
//! `S` tokens and retained fraction `r = 1 − ρ`:
//!
//! | method   | cache  | params        | flops         |
//! |----------|--------|---------------|---------------|
//! | baseline | `2SD`  | `2HD²`        | `4SHD²`       |
//! | svd      | `r·`   | `(r + r/H)·`  | `(r + r/H)·`  |
//! | palu     | `r·`   | `(r + r/2H)·` | `(r + r/2H)·` |
//! | rap      | `r·`   | `r·`          | `r·`          |
//!
//! Measured numbers come from an instrumented prefill: matmul FLOPs from the
//! tape counter, cache entries from the filled [`KvCache`], parameters from the
//! installed matrices (a pair index counts as zero parameters).

use serde::{Deserialize, Serialize};

use crate::budget::{allocate, BudgetMode};
use crate::error::{invalid, Result};
use crate::factorize::{build_compressed, CompressedModel, Method};
use crate::numcore::Tape;
use crate::scoring::PairScoreTable;
use crate::toymodel::{forward, Frozen, KeyProjection, KvCache, Model, ValueProjection};

/// Cache entries, parameters and FLOPs for producing one head's K/V states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub cache: f64,
    pub params: f64,
    pub flops: f64,
}

/// Multipliers on the baseline `(cache, params, flops)` for retained fraction `r`.
fn factors(method: Method, r: f64, h: f64) -> (f64, f64, f64) {
    match method {
        Method::Baseline => (1.0, 1.0, 1.0),
        Method::Svd => (r, r + r / h, r + r / h),
        Method::Palu => (r, r + r / (2.0 * h), r + r / (2.0 * h)),
        Method::Rap => (r, r, r),
    }
}

pub fn analytic_kv_projection(method: Method, r: f64, h: usize, d: usize, s: usize) -> Result<Resources> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(invalid(format!("retained fraction {r} must lie in (0, 1]")));
    }
    if h == 0 || d == 0 {
        return Err(invalid("head count and head dim must be positive"));
    }
    let (h, d, s) = (h as f64, d as f64, s as f64);
    let (c, p, f) = factors(method, r, h);
    Ok(Resources { cache: c * 2.0 * s * d, params: p * 2.0 * h * d * d, flops: f * 4.0 * s * h * d * d })
}

/// Compression ratio at which the method's K/V parameters equal the baseline's.
/// `None` for the baseline; zero for rap.
pub fn parameter_break_even(method: Method, h: usize) -> Option<f64> {
    let h = h as f64;
    let overhead = match method {
        Method::Baseline => return None,
        Method::Svd => 1.0 / h,
        Method::Palu => 1.0 / (2.0 * h),
        Method::Rap => 0.0,
    };
    Some(1.0 - 1.0 / (1.0 + overhead))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paired {
    pub analytic: f64,
    pub measured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub method: Method,
    pub rho: f64,
    /// Mean retained fraction actually installed (after rank/pair rounding).
    pub r: f64,
    pub tokens: usize,
    pub kv_cache_entries: Paired,
    /// `W_k`/`W_v` side only (factors, reconstruction bases).
    pub params_kv: Paired,
    /// All attention matrices (`W_q`, K/V factors, `W_o`).
    pub params_attention: usize,
    pub params_total: usize,
    pub flops_kv_projection: Paired,
    pub flops_attention_block: u64,
    /// Measured KV-projection FLOPs divided by `S · H_q · layers`.
    pub flops_kv_projection_per_head_token: f64,
}

/// Retained fraction of a layer's K and V sides as installed.
fn layer_fractions(model: &Model) -> Vec<(f64, f64)> {
    let d = model.spec.head_dim as f64;
    model
        .layers
        .iter()
        .map(|l| {
            let k = match &l.key {
                KeyProjection::Dense { .. } => 1.0,
                KeyProjection::Factored { b_k, .. } => b_k[0].rows() as f64 / d,
                KeyProjection::Pruned { retained, .. } => retained[0].width() as f64 / d,
            };
            let v = match &l.value {
                ValueProjection::Dense { .. } => 1.0,
                ValueProjection::Factored { b_v, .. } => b_v[0].rows() as f64 / d,
                ValueProjection::Absorbed { rank, .. } => *rank as f64 / d,
            };
            (k, v)
        })
        .collect()
}

pub fn measure_forward(compressed: &CompressedModel, tokens: &[usize]) -> Result<ResourceReport> {
    let model = &compressed.model;
    let spec = &model.spec;
    let mut cache = KvCache::new(model);
    let mut tape = Tape::new();
    forward(model, &mut cache, tokens, &mut tape, &mut Frozen)?;
    let flops = tape.flops();

    let s = tokens.len();
    let h = spec.model_dim() / spec.head_dim;
    let groups = spec.kv_heads as f64;
    let fractions = layer_fractions(model);
    let mut analytic = Resources { cache: 0.0, params: 0.0, flops: 0.0 };
    for &(k, v) in &fractions {
        // Every closed form is symmetric in K and V, so a layer uses their mean.
        let one = analytic_kv_projection(compressed.method, (k + v) / 2.0, h, spec.head_dim, s)?;
        analytic.cache += groups * one.cache;
        analytic.params += groups * one.params;
        analytic.flops += groups * one.flops;
    }
    let r = fractions.iter().map(|(k, v)| k + v).sum::<f64>() / (2 * fractions.len()) as f64;
    let kv_params: usize =
        model.layers.iter().map(|l| l.key.kv_parameter_count() + l.value.kv_parameter_count()).sum();
    let measured_kv = flops.kv_projection();
    Ok(ResourceReport {
        method: compressed.method,
        rho: compressed.rho,
        r,
        tokens: s,
        kv_cache_entries: Paired { analytic: analytic.cache, measured: cache.entries() as f64 },
        params_kv: Paired { analytic: analytic.params, measured: kv_params as f64 },
        params_attention: model.attention_parameter_count(),
        params_total: model.parameter_count(),
        flops_kv_projection: Paired { analytic: analytic.flops, measured: measured_kv as f64 },
        flops_attention_block: flops.attention_block(),
        flops_kv_projection_per_head_token: measured_kv as f64 / (s * spec.q_heads * spec.layers) as f64,
    })
}

/// One sweep row: a report plus its attention parameters relative to the dense model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub report: ResourceReport,
    pub params_attn_rel: f64,
}

/// Compresses `model` with every method at every ratio and measures a prefill of `tokens`.
/// `rap` allocates its pair budget from `scores` in `mode`.
pub fn sweep(
    model: &Model,
    scores: &PairScoreTable,
    mode: BudgetMode,
    methods: &[Method],
    ratios: &[f64],
    tokens: &[usize],
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(invalid(format!("ratio {bad} must lie in [0, 1)")));
    }
    let dense = model.attention_parameter_count() as f64;
    let mut rows = Vec::with_capacity(methods.len() * ratios.len());
    for &method in methods {
        for &rho in ratios {
            let plan = if method == Method::Rap { Some(allocate(scores, rho, mode)?) } else { None };
            let compressed = build_compressed(model, method, rho, Some(scores), plan.as_ref())?;
            let report = measure_forward(&compressed, tokens)?;
            let params_attn_rel = report.params_attention as f64 / dense;
            rows.push(SweepRow { report, params_attn_rel });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "method,rho,kv_entries,params_attn,params_attn_rel,params_total,\
flops_kvproj_analytic,flops_kvproj_measured,flops_attn_measured";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{:.6},{},{},{:.6},{},{:.6},{},{}\n",
            r.method,
            r.rho,
            r.kv_cache_entries.measured,
            r.params_attention,
            row.params_attn_rel,
            r.params_total,
            r.flops_kv_projection.analytic,
            r.flops_kv_projection.measured,
            r.flops_attention_block,
        ));
    }
    out
}

pub fn sweep_json(rows: &[SweepRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}
