//! Paired training samples from run datasets.
//!
//! Every emitted sequence is `[l x D]` row-major with channel 0 = current
//! density and channel 1 = voltage. OP-POL pairs condition on an operational
//! window and reconstruct the voltage of a polarization test from its current
//! staircase; OP-OP pairs reconstruct operational current from voltage.

mod shard;

pub use shard::{read_shard, write_shard, PreparedData, SHARD_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cellsim::{RunDataset, Series};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const SEQ_LEN: usize = 1024;
pub const N_CHANNELS: usize = 2;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Current = 0,
    Voltage = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    OpPol,
    OpOp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::OpPol => "op_pol",
            Task::OpOp => "op_op",
        }
    }

    /// Decoder input channel.
    pub fn input(self) -> Channel {
        match self {
            Task::OpPol => Channel::Current,
            Task::OpOp => Channel::Voltage,
        }
    }

    /// Reconstructed channel.
    pub fn target(self) -> Channel {
        match self {
            Task::OpPol => Channel::Voltage,
            Task::OpOp => Channel::Current,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub task: Task,
    /// `[l x D]`, both channels.
    pub x_enc: Vec<f32>,
    /// `[l x D]`, target channel zero.
    pub x_dec: Vec<f32>,
    /// `[l]`, zero past `valid_len`.
    pub y: Vec<f32>,
    pub valid_len: usize,
    /// Checkpoint the sample belongs to.
    pub cycle_index: u64,
    /// Encoder window start within the operational segment.
    pub window_offset: usize,
    /// Decoder window start within its source sequence.
    pub dec_offset: usize,
}

impl PairedSample {
    pub fn mask(&self) -> Vec<f32> {
        let mut m = vec![0.0; self.y.len()];
        m[..self.valid_len].fill(1.0);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl NormStats {
    pub fn normalize_value(&self, x: f64, ch: Channel) -> f64 {
        let c = ch as usize;
        (x - self.mean[c]) / self.std[c]
    }

    pub fn denormalize_value(&self, z: f64, ch: Channel) -> f64 {
        let c = ch as usize;
        z * self.std[c] + self.mean[c]
    }

    /// Normalizes an interleaved `[n x D]` sequence.
    pub fn normalize(&self, seq: &[f64]) -> Vec<f64> {
        seq.iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i % N_CHANNELS]) / self.std[i % N_CHANNELS])
            .collect()
    }

    pub fn denormalize(&self, seq: &[f64]) -> Vec<f64> {
        seq.iter()
            .enumerate()
            .map(|(i, &z)| z * self.std[i % N_CHANNELS] + self.mean[i % N_CHANNELS])
            .collect()
    }
}

/// Checkpoint cycle counts assigned to each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

impl SplitPlan {
    pub fn is_val(&self, cycle: u64) -> bool {
        self.val.contains(&cycle)
    }
}

/// Every third checkpoint (1-based positions 3, 6, ...) goes to validation.
pub fn split_checkpoints(checkpoints: &[u64]) -> Result<SplitPlan> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints to split".into()));
    }
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("checkpoints must be strictly increasing".into()));
    }
    let (val, train): (Vec<(usize, u64)>, Vec<(usize, u64)>) = checkpoints
        .iter()
        .copied()
        .enumerate()
        .partition(|(i, _)| (i + 1) % 3 == 0);
    Ok(SplitPlan {
        train: train.into_iter().map(|(_, c)| c).collect(),
        val: val.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Per-channel mean and population standard deviation over all samples of
/// `segments`, with the deviation floored at [`STD_FLOOR`].
pub fn fit_norm_stats(segments: &[&Series]) -> Result<NormStats> {
    let n: usize = segments.iter().map(|s| s.len()).sum();
    if n == 0 {
        return Err(Error::Data("no operational samples to fit normalization".into()));
    }
    let mut mean = [0.0; N_CHANNELS];
    for s in segments {
        mean[0] += s.current.iter().sum::<f64>();
        mean[1] += s.voltage.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = [0.0; N_CHANNELS];
    for s in segments {
        var[0] += s.current.iter().map(|x| (x - mean[0]).powi(2)).sum::<f64>();
        var[1] += s.voltage.iter().map(|x| (x - mean[1]).powi(2)).sum::<f64>();
    }
    let std = var.map(|v| (v / n as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// How many windows to draw and from which seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairOptions {
    /// Encoder windows per checkpoint for OP-POL pairs.
    pub windows_per_pair: usize,
    /// Encoder/decoder window pairs per segment for OP-OP pairs.
    pub windows_per_segment: usize,
    pub seed: u64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            windows_per_pair: 4,
            windows_per_segment: 8,
            seed: 0,
        }
    }
}

/// `count` window starts over a sequence of `len` samples: uniform random
/// when `rng` is given, otherwise evenly spaced and ending flush with the
/// sequence (one window takes the most recent samples).
fn window_offsets(len: usize, count: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<usize>> {
    if len < SEQ_LEN {
        return Err(Error::Data(format!(
            "operational segment has {len} samples, fewer than the window length {SEQ_LEN}"
        )));
    }
    let span = len - SEQ_LEN;
    Ok(match rng {
        Some(rng) => (0..count).map(|_| rng.random_range(0..=span)).collect(),
        None if count == 1 => vec![span],
        None => (0..count)
            .map(|k| ((k as f64) * span as f64 / (count - 1) as f64).round() as usize)
            .collect(),
    })
}

fn enc_window(seg: &Series, offset: usize, stats: &NormStats) -> Vec<f32> {
    let mut out = Vec::with_capacity(SEQ_LEN * N_CHANNELS);
    for t in offset..offset + SEQ_LEN {
        out.push(stats.normalize_value(seg.current[t], Channel::Current) as f32);
        out.push(stats.normalize_value(seg.voltage[t], Channel::Voltage) as f32);
    }
    out
}

/// Decoder input and target for the window of `src` starting at `offset`,
/// zero-padded past the end of `src`.
fn dec_window(src: &Series, offset: usize, task: Task, stats: &NormStats) -> (Vec<f32>, Vec<f32>, usize) {
    let valid = (src.len() - offset).min(SEQ_LEN);
    let channel = |ch: Channel| match ch {
        Channel::Current => &src.current,
        Channel::Voltage => &src.voltage,
    };
    let (inp, tgt) = (task.input(), task.target());
    let mut x = vec![0.0f32; SEQ_LEN * N_CHANNELS];
    let mut y = vec![0.0f32; SEQ_LEN];
    for k in 0..valid {
        let t = offset + k;
        x[k * N_CHANNELS + inp as usize] = stats.normalize_value(channel(inp)[t], inp) as f32;
        y[k] = stats.normalize_value(channel(tgt)[t], tgt) as f32;
    }
    (x, y, valid)
}

/// Decoder window starts tiling a sequence of `len` samples at stride l.
pub fn tile_starts(len: usize) -> Vec<usize> {
    (0..len.div_ceil(SEQ_LEN)).map(|k| k * SEQ_LEN).collect()
}

/// Index of the segment preceding checkpoint `cycle` and of its test.
fn checkpoint_position(run: &RunDataset, cycle: u64) -> Result<usize> {
    run.segments
        .iter()
        .position(|s| s.last_cycle == cycle)
        .ok_or_else(|| Error::Data(format!("run has no operational segment ending at cycle {cycle}")))
}

/// Normalized encoder window of the latest `l` operational samples before
/// checkpoint `cycle`; the window validation pairs use.
pub fn checkpoint_encoder_window(run: &RunDataset, cycle: u64, stats: &NormStats) -> Result<Vec<f32>> {
    let seg = &run.segments[checkpoint_position(run, cycle)?].series;
    let off = window_offsets(seg.len(), 1, None)?[0];
    Ok(enc_window(seg, off, stats))
}

fn split_cycles(plan: &SplitPlan, val: bool) -> &[u64] {
    if val {
        &plan.val
    } else {
        &plan.train
    }
}

/// OP-POL pairs for one split: each encoder window drawn from the segment
/// preceding a checkpoint is paired with every decoder window tiling that
/// checkpoint's polarization test.
pub fn make_op_pol_pairs(
    run: &RunDataset,
    plan: &SplitPlan,
    stats: &NormStats,
    opts: &PairOptions,
    val: bool,
) -> Result<Vec<PairedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "op_pol", val as u64));
    let mut out = Vec::new();
    for &cycle in split_cycles(plan, val) {
        let i = checkpoint_position(run, cycle)?;
        let seg = &run.segments[i].series;
        let pol = &run.pol_tests[i + 1];
        debug_assert_eq!(pol.cycle_index, cycle);
        let offsets = window_offsets(seg.len(), opts.windows_per_pair, (!val).then_some(&mut rng))?;
        for &off in &offsets {
            let x_enc = enc_window(seg, off, stats);
            for start in tile_starts(pol.series.len()) {
                let (x_dec, y, valid_len) = dec_window(&pol.series, start, Task::OpPol, stats);
                out.push(PairedSample {
                    task: Task::OpPol,
                    x_enc: x_enc.clone(),
                    x_dec,
                    y,
                    valid_len,
                    cycle_index: cycle,
                    window_offset: off,
                    dec_offset: start,
                });
            }
        }
    }
    Ok(out)
}

/// OP-OP pairs for one split: encoder and decoder windows from the same
/// segment at independent offsets.
pub fn make_op_op_pairs(
    run: &RunDataset,
    plan: &SplitPlan,
    stats: &NormStats,
    opts: &PairOptions,
    val: bool,
) -> Result<Vec<PairedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "op_op", val as u64));
    let mut out = Vec::new();
    for &cycle in split_cycles(plan, val) {
        let seg = &run.segments[checkpoint_position(run, cycle)?].series;
        let n = opts.windows_per_segment;
        let (enc, dec) = if val {
            let enc = window_offsets(seg.len(), n, None)?;
            let dec = enc.iter().rev().copied().collect();
            (enc, dec)
        } else {
            let enc = window_offsets(seg.len(), n, Some(&mut rng))?;
            let dec = window_offsets(seg.len(), n, Some(&mut rng))?;
            (enc, dec)
        };
        for (&e, &d) in enc.iter().zip(&dec) {
            let (x_dec, y, valid_len) = dec_window(seg, d, Task::OpOp, stats);
            out.push(PairedSample {
                task: Task::OpOp,
                x_enc: enc_window(seg, e, stats),
                x_dec,
                y,
                valid_len,
                cycle_index: cycle,
                window_offset: e,
                dec_offset: d,
            });
        }
    }
    Ok(out)
}

/// Split, fit statistics on training segments, and build all four sample
/// sets.
pub fn prepare(run: &RunDataset, opts: &PairOptions) -> Result<PreparedData> {
    let plan = split_checkpoints(&run.config.checkpoints)?;
    let train_segments = plan
        .train
        .iter()
        .map(|&c| Ok(&run.segments[checkpoint_position(run, c)?].series))
        .collect::<Result<Vec<_>>>()?;
    let stats = fit_norm_stats(&train_segments)?;
    Ok(PreparedData {
        train_op_pol: make_op_pol_pairs(run, &plan, &stats, opts, false)?,
        train_op_op: make_op_op_pairs(run, &plan, &stats, opts, false)?,
        val_op_pol: make_op_pol_pairs(run, &plan, &stats, opts, true)?,
        val_op_op: make_op_op_pairs(run, &plan, &stats, opts, true)?,
        stats,
        plan,
        options: *opts,
    })
}
