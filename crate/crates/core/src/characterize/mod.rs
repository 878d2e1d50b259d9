//! Virtual polarization tests: a trained model, conditioned on operational
//! data, predicts the voltage response to the commanded current staircase;
//! predicted and measured sequences are reduced to curves by the same code.

mod plot;

pub use plot::plot_curves_svg;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cellsim::{PolProtocol, RunDataset};
use crate::datapipe::{checkpoint_encoder_window, tile_starts, Channel, NormStats, N_CHANNELS, SEQ_LEN};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_J_REF: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveSource {
    Measured,
    Predicted,
}

/// Steady-state voltage per protocol level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationCurve {
    pub j: Vec<f64>,
    pub v: Vec<f64>,
    pub cycle_index: u64,
    pub source: CurveSource,
}

impl PolarizationCurve {
    /// Voltage at `j_ref` by linear interpolation between levels.
    pub fn voltage_at(&self, j_ref: f64) -> Result<f64> {
        let (j, v) = (&self.j, &self.v);
        if j.is_empty() || j_ref < j[0] || j_ref > j[j.len() - 1] {
            return Err(Error::Domain(format!("reference current {j_ref} outside the curve's levels")));
        }
        let k = j.partition_point(|&x| x < j_ref);
        if j[k] == j_ref {
            return Ok(v[k]);
        }
        let t = (j_ref - j[k - 1]) / (j[k] - j[k - 1]);
        Ok(v[k - 1] + t * (v[k] - v[k - 1]))
    }

    /// The staircase sequence whose steady windows hold exactly these values.
    pub fn render(&self, protocol: &PolProtocol) -> Vec<f64> {
        let per = protocol.samples_per_level();
        self.v.iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect()
    }
}

/// Voltage prediction for the protocol's staircase from latent state `z`,
/// in volts.
pub fn predict_pol_from_latent<T: Scalar>(
    model: &Model<T>,
    z: &Tensor<T>,
    protocol: &PolProtocol,
    stats: &NormStats,
) -> Result<Vec<f64>> {
    if model.seq_len() != SEQ_LEN || model.config().channels != N_CHANNELS {
        return Err(Error::Config(format!(
            "model expects {} x {} windows, data uses {SEQ_LEN} x {N_CHANNELS}",
            model.seq_len(),
            model.config().channels
        )));
    }
    let stair = protocol.staircase();
    let windows: Vec<Vec<T>> = tile_starts(stair.len())
        .into_iter()
        .map(|start| {
            let mut x = vec![T::ZERO; SEQ_LEN * N_CHANNELS];
            for (k, &j) in stair[start..].iter().take(SEQ_LEN).enumerate() {
                x[k * N_CHANNELS + Channel::Current as usize] =
                    T::from_f64(stats.normalize_value(j, Channel::Current) as f32 as f64);
            }
            x
        })
        .collect();
    let refs: Vec<&[T]> = windows.iter().map(Vec::as_slice).collect();
    let mut out = Vec::with_capacity(stair.len());
    for pred in model.decode_latent(z, &refs)? {
        let take = (stair.len() - out.len()).min(SEQ_LEN);
        out.extend(
            pred[..take]
                .iter()
                .map(|&y| stats.denormalize_value(y.to_f64(), Channel::Voltage)),
        );
    }
    Ok(out)
}

/// Voltage prediction, in volts, for a whole polarization test conditioned
/// on one normalized encoder window `[l x D]`.
pub fn predict_pol_timeseries<T: Scalar>(
    model: &Model<T>,
    x_enc: &[f32],
    protocol: &PolProtocol,
    stats: &NormStats,
) -> Result<Vec<f64>> {
    let x: Vec<T> = x_enc.iter().map(|&v| T::from_f64(v as f64)).collect();
    let z = model.latent(&x)?;
    predict_pol_from_latent(model, &z, protocol, stats)
}

/// Mean of the final steady window of every level.
pub fn aggregate_curve(
    voltage: &[f64],
    protocol: &PolProtocol,
    cycle_index: u64,
    source: CurveSource,
) -> Result<PolarizationCurve> {
    if voltage.len() != protocol.len() {
        return Err(Error::Data(format!(
            "sequence has {} samples, protocol needs {}",
            voltage.len(),
            protocol.len()
        )));
    }
    let per = protocol.samples_per_level();
    let w = protocol.steady_window_samples();
    let v = (0..protocol.levels.len())
        .map(|i| {
            let win = &voltage[(i + 1) * per - w..(i + 1) * per];
            // deviations from the first sample keep constant windows exact
            let v0 = win[0];
            v0 + win.iter().map(|&x| x - v0).sum::<f64>() / w as f64
        })
        .collect();
    Ok(PolarizationCurve {
        j: protocol.levels.clone(),
        v,
        cycle_index,
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveError {
    /// Mean squared voltage difference in V².
    pub physical: f64,
    /// The same in normalized voltage units.
    pub normalized: f64,
    pub mean_abs_v: f64,
    pub max_abs_v: f64,
}

pub fn curve_mse(pred: &PolarizationCurve, meas: &PolarizationCurve, stats: &NormStats) -> Result<CurveError> {
    if pred.j != meas.j {
        return Err(Error::Data("curves are on different current levels".into()));
    }
    let d: Vec<f64> = pred.v.iter().zip(&meas.v).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let physical = d.iter().map(|x| x * x).sum::<f64>() / n;
    let sd = stats.std[Channel::Voltage as usize];
    Ok(CurveError {
        physical,
        normalized: physical / (sd * sd),
        mean_abs_v: d.iter().map(|x| x.abs()).sum::<f64>() / n,
        max_abs_v: d.iter().fold(0.0, |m, x| m.max(x.abs())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub cycle_index: u64,
    pub v_measured: f64,
    pub v_predicted: f64,
}

/// Voltage at a reference current density across checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub j_ref: f64,
    pub rows: Vec<DegradationRow>,
    /// Consecutive checkpoint pairs `(earlier, later)` where the voltage fell.
    pub measured_violations: Vec<(u64, u64)>,
    pub predicted_violations: Vec<(u64, u64)>,
    /// Fraction of all checkpoint pairs ordered the same way by both sources;
    /// 1 with fewer than two checkpoints.
    pub rank_agreement: f64,
}

fn violations(cycles: &[u64], v: &[f64]) -> Vec<(u64, u64)> {
    (1..v.len())
        .filter(|&i| v[i] < v[i - 1])
        .map(|i| (cycles[i - 1], cycles[i]))
        .collect()
}

/// Pairs `(measured, predicted)` must be for the same checkpoints, in
/// increasing cycle order.
pub fn degradation_report(pairs: &[(PolarizationCurve, PolarizationCurve)], j_ref: f64) -> Result<DegradationReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (m, p) in pairs {
        if m.cycle_index != p.cycle_index {
            return Err(Error::Data(format!(
                "measured curve at cycle {} paired with prediction at cycle {}",
                m.cycle_index, p.cycle_index
            )));
        }
        if rows.last().is_some_and(|r: &DegradationRow| r.cycle_index >= m.cycle_index) {
            return Err(Error::Data("curves must be in increasing cycle order".into()));
        }
        rows.push(DegradationRow {
            cycle_index: m.cycle_index,
            v_measured: m.voltage_at(j_ref)?,
            v_predicted: p.voltage_at(j_ref)?,
        });
    }
    let cycles: Vec<u64> = rows.iter().map(|r| r.cycle_index).collect();
    let vm: Vec<f64> = rows.iter().map(|r| r.v_measured).collect();
    let vp: Vec<f64> = rows.iter().map(|r| r.v_predicted).collect();
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..rows.len() {
        for k in i + 1..rows.len() {
            total += 1;
            agree += ((vm[k] - vm[i]).signum() == (vp[k] - vp[i]).signum()) as usize;
        }
    }
    Ok(DegradationReport {
        j_ref,
        measured_violations: violations(&cycles, &vm),
        predicted_violations: violations(&cycles, &vp),
        rank_agreement: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
        rows,
    })
}

/// Measured and predicted curves, plus the predicted voltage sequence, for
/// the test taken at checkpoint `cycle` of `run`.
pub struct VirtualTest {
    pub measured: PolarizationCurve,
    pub predicted: PolarizationCurve,
    pub predicted_voltage: Vec<f64>,
}

pub fn virtual_test<T: Scalar>(model: &Model<T>, run: &RunDataset, cycle: u64, stats: &NormStats) -> Result<VirtualTest> {
    let pol = run
        .pol_tests
        .iter()
        .find(|p| p.cycle_index == cycle)
        .ok_or_else(|| Error::Data(format!("run has no polarization test at cycle {cycle}")))?;
    let protocol = &run.config.protocol;
    let x_enc = checkpoint_encoder_window(run, cycle, stats)?;
    let predicted_voltage = predict_pol_timeseries(model, &x_enc, protocol, stats)?;
    Ok(VirtualTest {
        measured: aggregate_curve(&pol.series.voltage, protocol, cycle, CurveSource::Measured)?,
        predicted: aggregate_curve(&predicted_voltage, protocol, cycle, CurveSource::Predicted)?,
        predicted_voltage,
    })
}

/// Predicted voltage at `j_ref` for two checkpoints, decoded from their own
/// latent states and from each other's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSwap {
    pub early: u64,
    pub late: u64,
    pub j_ref: f64,
    /// `(early, late)` with their own latents.
    pub own: (f64, f64),
    /// `(early, late)` with the latents exchanged.
    pub swapped: (f64, f64),
}

impl LatentSwap {
    /// The later checkpoint is predicted higher, and exchanging latents
    /// exchanges the order.
    pub fn follows_latent(&self) -> bool {
        self.own.0 < self.own.1 && self.swapped.0 > self.swapped.1
    }
}

pub fn latent_swap<T: Scalar>(
    model: &Model<T>,
    run: &RunDataset,
    early: u64,
    late: u64,
    stats: &NormStats,
    j_ref: f64,
) -> Result<LatentSwap> {
    let protocol = &run.config.protocol;
    let z = |cycle| -> Result<Tensor<T>> {
        let x: Vec<T> = checkpoint_encoder_window(run, cycle, stats)?
            .iter()
            .map(|&v| T::from_f64(v as f64))
            .collect();
        model.latent(&x)
    };
    let (z_early, z_late) = (z(early)?, z(late)?);
    let v_at = |z: &Tensor<T>, cycle| -> Result<f64> {
        let v = predict_pol_from_latent(model, z, protocol, stats)?;
        aggregate_curve(&v, protocol, cycle, CurveSource::Predicted)?.voltage_at(j_ref)
    };
    Ok(LatentSwap {
        early,
        late,
        j_ref,
        own: (v_at(&z_early, early)?, v_at(&z_late, late)?),
        swapped: (v_at(&z_late, early)?, v_at(&z_early, late)?),
    })
}

pub const CURVE_CSV_HEADER: &str = "j_A_cm2,v_pred_V,v_meas_V,cycle_index";

/// One row per level and checkpoint; pairs are `(measured, predicted)`.
pub fn curves_csv(pairs: &[(PolarizationCurve, PolarizationCurve)]) -> Result<String> {
    let mut s = String::from(CURVE_CSV_HEADER);
    s.push('\n');
    for (m, p) in pairs {
        if m.j != p.j || m.cycle_index != p.cycle_index {
            return Err(Error::Data("measured and predicted curves are not aligned".into()));
        }
        for k in 0..m.j.len() {
            writeln!(s, "{},{},{},{}", m.j[k], p.v[k], m.v[k], m.cycle_index).expect("write to string");
        }
    }
    Ok(s)
}

pub fn write_curves_csv(path: &Path, pairs: &[(PolarizationCurve, PolarizationCurve)]) -> Result<()> {
    fs::write(path, curves_csv(pairs)?).map_err(|e| Error::io(path, e))
}
