//! Analytic FLOPs accounting and evaluation of routed inference.

use std::time::Instant;

use rayon::prelude::*;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::report::Csv;
use crate::student::{Routed, StudentModel};
use crate::world::{Dataset, ACTION_DIMS};

/// Default success predicate: `‖â − a‖∞ < 0.05`.
pub const SUCCESS_THRESHOLD: f64 = 0.05;

/// FLOP counts (1 multiply-accumulate = 2 FLOPs) of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsModel {
    /// cost of each trunk layer
    pub per_layer: Vec<f64>,
    /// encoders, router and final head: paid on every input
    pub fixed: f64,
}

impl FlopsModel {
    /// Sequence length is `n_visual + 1` (one instruction token).
    pub fn from_config(cfg: &BackboneConfig, n_visual: usize) -> Self {
        let n = (n_visual + 1) as f64;
        let d = cfg.width as f64;
        let attention = 2.0 * (4.0 * n * d * d + 2.0 * n * n * d);
        let ffn = 2.0 * 2.0 * n * d * cfg.ffn_dim() as f64;
        let encoders = n_visual as f64 * cfg.token_dim as f64 * d + cfg.instruction_dim as f64 * d;
        let router = 2.0 * d * cfg.layers as f64;
        let head = d * cfg.head_hidden as f64 + cfg.head_hidden as f64 * ACTION_DIMS as f64;
        Self {
            per_layer: vec![attention + ffn; cfg.layers],
            fixed: 2.0 * (encoders + router + head),
        }
    }

    pub fn dense(&self) -> f64 {
        self.fixed + self.per_layer.iter().sum::<f64>()
    }

    pub fn dense_backbone(&self) -> f64 {
        self.per_layer.iter().sum()
    }

    pub fn routed_backbone(&self, mask: &[bool]) -> f64 {
        self.per_layer.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| c).sum()
    }
}

/// `(routed, dense, ratio)` including fixed costs.
pub fn count_flops(model: &FlopsModel, mask: &[bool]) -> Result<(f64, f64, f64)> {
    if mask.len() != model.per_layer.len() {
        return Err(Error::shape(
            "count_flops",
            format!("mask length {} vs {} layers", mask.len(), model.per_layer.len()),
        ));
    }
    let routed = model.fixed + model.routed_backbone(mask);
    let dense = model.dense();
    Ok((routed, dense, routed / dense))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub success: f64,
    /// batch mean of `‖â − a‖²`
    pub action_mse: f64,
    pub mean_executed: f64,
    /// routed / dense, fixed costs included
    pub flops_ratio: f64,
    /// routed / dense over trunk layers only
    pub backbone_ratio: f64,
    /// informational; never written to CSV
    pub wall_clock_ms: f64,
    /// `[episode][layer]` execution decisions
    pub masks: Vec<Vec<bool>>,
    pub gates: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn speedup_proxy(&self) -> f64 {
        1.0 / self.flops_ratio
    }

    pub fn executed_total(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

fn aggregate(routed: Vec<Routed>, data: &Dataset, flops: &FlopsModel, tau: f64, threshold: f64, ms: f64) -> Result<EvalReport> {
    let n = data.len() as f64;
    let mut success = 0.0;
    let mut mse = 0.0;
    let mut executed = 0.0;
    let mut ratio = 0.0;
    let mut bb = 0.0;
    for (r, e) in routed.iter().zip(&data.episodes) {
        let diffs: Vec<f64> = r.action.data().iter().zip(e.action.data()).map(|(p, t)| p - t).collect();
        let inf = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if inf < threshold {
            success += 1.0;
        }
        mse += diffs.iter().map(|d| d * d).sum::<f64>();
        executed += r.gates.executed() as f64;
        ratio += count_flops(flops, &r.gates.mask)?.2;
        bb += flops.routed_backbone(&r.gates.mask) / flops.dense_backbone();
    }
    Ok(EvalReport {
        tau,
        success: success / n,
        action_mse: mse / n,
        mean_executed: executed / n,
        flops_ratio: ratio / n,
        backbone_ratio: bb / n,
        wall_clock_ms: ms / n,
        masks: routed.iter().map(|r| r.gates.mask.clone()).collect(),
        gates: routed.into_iter().map(|r| r.gates.g).collect(),
    })
}

fn run(data: &Dataset, f: impl Fn(&crate::world::Episode) -> Result<Routed> + Sync + Send) -> Result<(Vec<Routed>, f64)> {
    let start = Instant::now();
    let out = data.episodes.par_iter().map(f).collect::<Result<Vec<_>>>()?;
    Ok((out, start.elapsed().as_secs_f64() * 1e3))
}

/// Routed inference over `data` at threshold `tau`.
pub fn evaluate(student: &StudentModel, data: &Dataset, tau: f64, threshold: f64) -> Result<EvalReport> {
    let flops = FlopsModel::from_config(&student.backbone.cfg, data.episodes[0].visual.dims2().0);
    let (routed, ms) = run(data, |e| student.hard_routed_forward(e, tau))?;
    aggregate(routed, data, &flops, tau, threshold, ms)
}

/// Forced skipping of the `n` lowest-gated layers per input.
pub fn evaluate_skip_n(student: &StudentModel, data: &Dataset, n: usize, threshold: f64) -> Result<EvalReport> {
    if n >= student.layers() {
        return Err(Error::Invalid(format!("skip count {n} must be below the layer count {}", student.layers())));
    }
    let flops = FlopsModel::from_config(&student.backbone.cfg, data.episodes[0].visual.dims2().0);
    let (routed, ms) = run(data, |e| student.skip_n_forward(e, n))?;
    aggregate(routed, data, &flops, f64::NAN, threshold, ms)
}

/// Dense teacher success under the same predicate.
pub fn teacher_success(teacher: &Backbone, data: &Dataset, threshold: f64) -> Result<(f64, f64)> {
    let preds = data.episodes.par_iter().map(|e| teacher.predict(e)).collect::<Result<Vec<_>>>()?;
    let mut ok = 0.0;
    let mut mse = 0.0;
    for (p, e) in preds.iter().zip(&data.episodes) {
        let d: Vec<f64> = p.data().iter().zip(e.action.data()).map(|(a, b)| a - b).collect();
        if d.iter().all(|v| v.abs() < threshold) {
            ok += 1.0;
        }
        mse += d.iter().map(|v| v * v).sum::<f64>();
    }
    let n = data.len() as f64;
    Ok((ok / n, mse / n))
}

/// One row per threshold: `tau, success, flops_ratio, speedup`.
pub fn sweep_tau(student: &StudentModel, data: &Dataset, taus: &[f64], threshold: f64) -> Result<(Csv, Vec<EvalReport>)> {
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Invalid(format!("tau sweep values must lie in (0, 1), got {t}")));
    }
    let mut csv = Csv::new(&["tau", "success", "flops_ratio", "speedup"]);
    let mut reports = Vec::with_capacity(taus.len());
    for &t in taus {
        let r = evaluate(student, data, t, threshold)?;
        csv.push(vec![t.into(), r.success.into(), r.flops_ratio.into(), r.speedup_proxy().into()]);
        reports.push(r);
    }
    Ok((csv, reports))
}

/// One row per skip count: `n, success, flops_ratio`.
pub fn sweep_skip_n(student: &StudentModel, data: &Dataset, ns: &[usize], threshold: f64) -> Result<(Csv, Vec<EvalReport>)> {
    let mut csv = Csv::new(&["n", "success", "flops_ratio"]);
    let mut reports = Vec::with_capacity(ns.len());
    for &n in ns {
        let r = evaluate_skip_n(student, data, n, threshold)?;
        csv.push(vec![n.into(), r.success.into(), r.flops_ratio.into()]);
        reports.push(r);
    }
    Ok((csv, reports))
}

/// Fraction of episodes in which each layer executed: `layer, frequency`.
pub fn activation_histogram(report: &EvalReport) -> Csv {
    let layers = report.masks.first().map_or(0, Vec::len);
    let n = report.masks.len() as f64;
    let mut csv = Csv::new(&["layer", "frequency"]);
    for l in 0..layers {
        let count = report.masks.iter().filter(|m| m[l]).count() as f64;
        csv.push(vec![l.into(), (count / n).into()]);
    }
    csv
}

/// Per-episode gate trace: `episode, layer, g, executed`.
pub fn gate_trace(report: &EvalReport) -> Csv {
    let mut csv = Csv::new(&["episode", "layer", "g", "executed"]);
    for (i, (g, m)) in report.gates.iter().zip(&report.masks).enumerate() {
        for l in 0..g.len() {
            csv.push(vec![i.into(), l.into(), g[l].into(), m[l].into()]);
        }
    }
    csv
}

/// Summary row of one evaluation: `tau, success, action_mse, mean_executed,
/// flops_ratio, backbone_ratio`.
pub fn eval_csv(reports: &[EvalReport]) -> Csv {
    let mut csv = Csv::new(&["tau", "success", "action_mse", "mean_executed", "flops_ratio", "backbone_ratio"]);
    for r in reports {
        csv.push(vec![
            r.tau.into(),
            r.success.into(),
            r.action_mse.into(),
            r.mean_executed.into(),
            r.flops_ratio.into(),
            r.backbone_ratio.into(),
        ]);
    }
    csv
}
