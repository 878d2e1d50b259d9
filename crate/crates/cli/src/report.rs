//! Combined report of a `reproduce` invocation. Contains no timings, so
//! identical inputs give identical bytes.

use std::fmt::Write as _;

use pemvc_core::cellsim::{DegradationRates, LoadProfile, ProfileKind};
use pemvc_core::characterize::{CurveError, DegradationReport, LatentSwap, PolarizationCurve};
use pemvc_core::training::EvalReport;
use serde::{Deserialize, Serialize};

/// Patch must beat vanilla's curve error by this factor to count as a
/// clear win.
pub const CLEAR_WIN: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: String,
    pub config_hash: String,
    pub epoch: usize,
    pub train: EvalReport,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointError {
    pub cycle_index: u64,
    pub error: CurveError,
}

/// Curve errors over the validation checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// Mean over checkpoints of the per-curve MSE, normalized voltage units.
    pub mse_normalized: f64,
    /// The same in V².
    pub mse_physical: f64,
    /// Mean absolute error over every level of every checkpoint, V.
    pub mae_v: f64,
    pub max_abs_v: f64,
    /// Mean absolute error at each protocol level, V.
    pub level_mae_v: Vec<f64>,
    pub checkpoints: Vec<CheckpointError>,
}

impl CurveSummary {
    /// `pairs` are `(measured, predicted)`, aligned with `checkpoints`.
    pub fn new(pairs: &[(PolarizationCurve, PolarizationCurve)], checkpoints: Vec<CheckpointError>) -> Self {
        let n = checkpoints.len().max(1) as f64;
        let levels = pairs.first().map_or(0, |(m, _)| m.v.len());
        let level_mae_v = (0..levels)
            .map(|k| pairs.iter().map(|(m, p)| (p.v[k] - m.v[k]).abs()).sum::<f64>() / n)
            .collect::<Vec<_>>();
        Self {
            mse_normalized: checkpoints.iter().map(|c| c.error.normalized).sum::<f64>() / n,
            mse_physical: checkpoints.iter().map(|c| c.error.physical).sum::<f64>() / n,
            mae_v: checkpoints.iter().map(|c| c.error.mean_abs_v).sum::<f64>() / n,
            max_abs_v: checkpoints.iter().fold(0.0, |a, c| a.max(c.error.max_abs_v)),
            level_mae_v,
            checkpoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub config_hash: String,
    pub param_count: usize,
    pub best_epoch: usize,
    /// Per-timestep masked MSE by task.
    pub train: EvalReport,
    pub val: EvalReport,
    pub curve: CurveSummary,
    pub degradation: DegradationReport,
    /// First against last validation checkpoint.
    pub latent_swap: Option<LatentSwap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub profile: LoadProfile,
    pub rates: DegradationRates,
    pub checkpoints: usize,
    pub validation_cycles: Vec<u64>,
    pub vanilla: VariantResult,
    pub patch: VariantResult,
}

impl RunResult {
    /// Vanilla curve MSE over patch curve MSE.
    pub fn improvement(&self) -> f64 {
        self.vanilla.curve.mse_normalized / self.patch.curve.mse_normalized
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Runs where patch's validation curve MSE is at most vanilla's.
    pub patch_not_worse: usize,
    /// Runs where it is at least [`CLEAR_WIN`] times lower.
    pub patch_clear_wins: usize,
    /// Run with the lowest patch curve MSE.
    pub best_run: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

impl Report {
    pub fn new(seed: u64, runs: Vec<RunResult>) -> Self {
        let best = runs
            .iter()
            .min_by(|a, b| a.patch.curve.mse_normalized.total_cmp(&b.patch.curve.mse_normalized))
            .map_or_else(String::new, |r| r.name.clone());
        let summary = Summary {
            patch_not_worse: runs
                .iter()
                .filter(|r| r.patch.curve.mse_normalized <= r.vanilla.curve.mse_normalized)
                .count(),
            patch_clear_wins: runs.iter().filter(|r| r.improvement() >= CLEAR_WIN).count(),
            best_run: best,
        };
        Self { seed, runs, summary }
    }

    pub fn best_run(&self) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.name == self.summary.best_run)
    }
}

pub fn summary_line(r: &Report) -> String {
    format!(
        "patch curve error <= vanilla on {}/{} runs, >= {CLEAR_WIN}x lower on {}; best run {}",
        r.summary.patch_not_worse,
        r.runs.len(),
        r.summary.patch_clear_wins,
        r.summary.best_run
    )
}

fn profile_label(p: &LoadProfile) -> String {
    let kind = match p.kind {
        ProfileKind::OnOff => "on/off",
        ProfileKind::LoadUnload => "load/unload",
    };
    format!("{kind} {}-{} V", p.v_low, p.v_high)
}

fn table_row(label: &str, cells: impl Iterator<Item = f64>) -> String {
    let cells: Vec<String> = cells.map(|v| format!("{v:.3e}")).collect();
    format!("| {label} | {} |\n", cells.join(" | "))
}

pub fn markdown(r: &Report) -> String {
    let mut s = String::new();
    let names: Vec<&str> = r.runs.iter().map(|x| x.name.as_str()).collect();
    let head = format!("| | {} |\n|---|{}\n", names.join(" | "), "---:|".repeat(names.len()));

    s.push_str("# Prediction error (validation set)\n\n");
    writeln!(s, "Root seed {}. Errors are MSE in normalized voltage units.\n", r.seed).unwrap();
    s.push_str("## AST curve prediction error\n\nPer-timestep masked MSE on OP-OP pairs.\n\n");
    s.push_str(&head);
    s.push_str(&table_row("Transformer", r.runs.iter().map(|x| x.vanilla.val.op_op.normalized)));
    s.push_str(&table_row("Patch transformer", r.runs.iter().map(|x| x.patch.val.op_op.normalized)));
    s.push_str("\n## Polarization curve prediction error\n\n");
    s.push_str("Mean over validation checkpoints of the squared error of the steady-state curve.\n\n");
    s.push_str(&head);
    s.push_str(&table_row("Transformer", r.runs.iter().map(|x| x.vanilla.curve.mse_normalized)));
    s.push_str(&table_row("Patch transformer", r.runs.iter().map(|x| x.patch.curve.mse_normalized)));
    writeln!(s, "\n{}.\n", summary_line(r)).unwrap();

    s.push_str("## Runs\n\n");
    s.push_str("| run | profile | k_r | k_j | checkpoints | validation cycles |\n|---|---|---:|---:|---:|---|\n");
    for x in &r.runs {
        let cycles: Vec<String> = x.validation_cycles.iter().map(u64::to_string).collect();
        writeln!(
            s,
            "| {} | {} | {:e} | {:e} | {} | {} |",
            x.name,
            profile_label(&x.profile),
            x.rates.k_r,
            x.rates.k_j,
            x.checkpoints,
            cycles.join(", ")
        )
        .unwrap();
    }

    s.push_str("\n## Details\n\n");
    s.push_str(
        "| run | model | params | best epoch | val OP-POL | val OP-OP | curve MSE (V²) | mean abs (mV) | max abs (mV) | rank agreement |\n",
    );
    s.push_str("|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for x in &r.runs {
        for v in [&x.vanilla, &x.patch] {
            writeln!(
                s,
                "| {} | {} | {} | {} | {:.3e} | {:.3e} | {:.3e} | {:.2} | {:.2} | {:.3} |",
                x.name,
                v.variant,
                v.param_count,
                v.best_epoch,
                v.val.op_pol.normalized,
                v.val.op_op.normalized,
                v.curve.mse_physical,
                v.curve.mae_v * 1e3,
                v.curve.max_abs_v * 1e3,
                v.degradation.rank_agreement
            )
            .unwrap();
        }
    }

    for x in &r.runs {
        writeln!(s, "\n### {}: voltage at {} A/cm²\n", x.name, x.patch.degradation.j_ref).unwrap();
        s.push_str("| cycle | measured (V) | patch (V) | vanilla (V) |\n|---:|---:|---:|---:|\n");
        for (p, v) in x.patch.degradation.rows.iter().zip(&x.vanilla.degradation.rows) {
            writeln!(s, "| {} | {:.4} | {:.4} | {:.4} |", p.cycle_index, p.v_measured, p.v_predicted, v.v_predicted)
                .unwrap();
        }
    }
    s
}

pub fn eval_markdown(e: &EvalSummary) -> String {
    let mut s = String::new();
    writeln!(s, "# {} model, epoch {}\n\nconfig {}\n", e.variant, e.epoch, e.config_hash).unwrap();
    s.push_str("| split | task | MSE (normalized) | MSE (V²) |\n|---|---|---:|---:|\n");
    for (split, r) in [("train", &e.train), ("validation", &e.val)] {
        for (task, t) in [("OP-OP", &r.op_op), ("OP-POL", &r.op_pol)] {
            writeln!(s, "| {split} | {task} | {:.4e} | {:.4e} |", t.normalized, t.physical).unwrap();
        }
    }
    s
}
