use serde::{Deserialize, Serialize};

use crate::datapipe::{NormStats, PairedSample, Task};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskError {
    /// Masked MSE in normalized units.
    pub normalized: f64,
    /// Masked MSE in physical units (A²/cm⁴ for current, V² for voltage).
    pub physical: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub op_op: TaskError,
    pub op_pol: TaskError,
}

/// Sum of squared errors over valid positions, and the position count.
fn sse(samples: &[PairedSample], predict: &mut dyn FnMut(&PairedSample) -> Result<Vec<f64>>) -> Result<(f64, usize)> {
    let (mut total, mut count) = (0.0, 0);
    for s in samples {
        let pred = predict(s)?;
        if pred.len() != s.y.len() {
            return Err(Error::shape("evaluate", &[pred.len()], &[s.y.len()]));
        }
        for k in 0..s.valid_len {
            let d = pred[k] - s.y[k] as f64;
            total += d * d;
        }
        count += s.valid_len;
    }
    Ok((total, count))
}

pub(super) fn split_loss<T: Scalar>(
    model: &Model<T>,
    samples: &[PairedSample],
    convert: &dyn Fn(&[f32]) -> Vec<T>,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut f = |s: &PairedSample| -> Result<Vec<f64>> {
        Ok(model
            .predict(&convert(&s.x_enc), &convert(&s.x_dec))?
            .into_iter()
            .map(Scalar::to_f64)
            .collect())
    };
    let (total, count) = sse(samples, &mut f)?;
    Ok(Some(total / count as f64))
}

/// Errors of an arbitrary predictor of normalized targets. `op_pol` and
/// `op_op` must both be non-empty.
pub fn evaluate_with(
    op_pol: &[PairedSample],
    op_op: &[PairedSample],
    stats: &NormStats,
    mut predict: impl FnMut(&PairedSample) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut one = |samples: &[PairedSample], task: Task| -> Result<TaskError> {
        if samples.is_empty() {
            return Err(Error::Data(format!("no {} samples to evaluate", task.name())));
        }
        if let Some(s) = samples.iter().find(|s| s.task != task) {
            return Err(Error::Data(format!("{} sample among {} samples", s.task.name(), task.name())));
        }
        let (total, count) = sse(samples, &mut predict)?;
        let normalized = total / count as f64;
        let sd = stats.std[task.target() as usize];
        Ok(TaskError { normalized, physical: normalized * sd * sd })
    };
    Ok(EvalReport {
        op_pol: one(op_pol, Task::OpPol)?,
        op_op: one(op_op, Task::OpOp)?,
    })
}

/// Deterministic (dropout off) errors of `model` on one split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    op_pol: &[PairedSample],
    op_op: &[PairedSample],
    stats: &NormStats,
) -> Result<EvalReport> {
    let cast = |xs: &[f32]| xs.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
    evaluate_with(op_pol, op_op, stats, |s| {
        Ok(model
            .predict(&cast(&s.x_enc), &cast(&s.x_dec))?
            .into_iter()
            .map(Scalar::to_f64)
            .collect())
    })
}
