//! Mixed-task training with masked MSE, Adam and a plateau schedule.
//!
//! Each batch holds samples of one task. Gradients are accumulated one
//! sample at a time, seeded with that sample's share of the batch's valid
//! positions, so the update equals that of the batch-level masked MSE.

mod checkpoint;
mod eval;

pub use checkpoint::{load_trained, save_trained, TrainedModel};
pub use eval::{evaluate, evaluate_with, EvalReport, TaskError};

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{PairedSample, PreparedData, Task};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamState, PlateauScheduler, Scalar, Tape};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of OP-OP samples per epoch; `None` keeps the datasets'
    /// natural proportion.
    pub mix_ratio: Option<f64>,
    /// Samples drawn per epoch; `None` uses every sample once.
    pub samples_per_epoch: Option<usize>,
    pub seed: u64,
    pub eval_every: usize,
    /// Print one line per epoch.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            lr: 1e-4,
            mix_ratio: None,
            samples_per_epoch: None,
            seed: 0,
            eval_every: 1,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs and eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(r) = self.mix_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mix_ratio {r} not in [0, 1]")));
            }
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::Config("samples_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// One completed epoch. Losses are normalized masked MSE; validation losses
/// are `None` on epochs without evaluation or when the split is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_op_pol: Option<f64>,
    pub train_op_op: Option<f64>,
    pub val_op_pol: Option<f64>,
    pub val_op_op: Option<f64>,
    pub best: bool,
    /// Seconds since training started; kept out of the history file so
    /// reruns write identical bytes.
    #[serde(skip)]
    pub wall_s: f64,
}

/// Equality ignores `wall_s`.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        (self.epoch, self.lr, self.train_loss, self.train_op_pol, self.train_op_op)
            == (o.epoch, o.lr, o.train_loss, o.train_op_pol, o.train_op_op)
            && (self.val_op_pol, self.val_op_op, self.best) == (o.val_op_pol, o.val_op_op, o.best)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.9e}"))
}

impl TrainHistory {
    pub const HEADER: &'static str = "epoch,lr,train_loss,train_op_pol,train_op_op,val_op_pol,val_op_op,best";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{:e},{:.9e},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                opt(r.train_op_pol),
                opt(r.train_op_op),
                opt(r.val_op_pol),
                opt(r.val_op_op),
                r.best as u8
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.best)
    }
}

pub struct TrainOutcome<T> {
    /// Parameters from the best monitored epoch.
    pub best: TrainedModel<T>,
    /// Parameters after the last epoch.
    pub last: Model<T>,
    pub history: TrainHistory,
    pub adam: AdamState,
}

/// Position-weighted masked MSE over one batch, accumulating parameter
/// gradients into `model.params`.
fn batch_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[&PairedSample],
    rng: &mut ChaCha8Rng,
    convert: &dyn Fn(&[f32]) -> Vec<T>,
) -> Result<f64> {
    let total: usize = batch.iter().map(|s| s.valid_len).sum();
    let mut loss = 0.0;
    for s in batch {
        let weight = s.valid_len as f64 / total as f64;
        let mask = convert(&s.mask());
        let mut tape = Tape::new();
        let l = model.sample_loss(
            &mut tape,
            &convert(&s.x_enc),
            &convert(&s.x_dec),
            &convert(&s.y),
            Some(&mask),
            Some(rng),
        )?;
        let value = tape.value(l).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite {} loss on sample at cycle {} (offset {})",
                s.task.name(),
                s.cycle_index,
                s.dec_offset
            )));
        }
        loss += weight * value;
        tape.backward_with_seed(l, T::from_f64(weight))?;
        tape.accumulate_param_grads(&mut model.params);
    }
    Ok(loss)
}

/// Sample counts per task for one epoch.
fn epoch_counts(cfg: &TrainConfig, n_pol: usize, n_op: usize) -> (usize, usize) {
    let available = n_pol + n_op;
    let total = cfg.samples_per_epoch.map_or(available, |c| c.min(available));
    let ratio = cfg.mix_ratio.unwrap_or(n_op as f64 / available as f64);
    let op = ((ratio * total as f64).round() as usize).min(n_op);
    let pol = (total - op).min(n_pol);
    (pol, op)
}

fn cast_slice<T: Scalar>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64(x as f64)).collect()
}

/// Trains `model` on `data`, optionally writing `best.ckpt` and
/// `history.csv` under `out`.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    data: &PreparedData,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train_op_pol.is_empty() && data.train_op_op.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let convert: &dyn Fn(&[f32]) -> Vec<T> = &cast_slice::<T>;
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<T>)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let (n_pol, n_op) = epoch_counts(cfg, data.train_op_pol.len(), data.train_op_op.len());
        let mut pol: Vec<&PairedSample> = data.train_op_pol.iter().collect();
        let mut op: Vec<&PairedSample> = data.train_op_op.iter().collect();
        pol.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle_op_pol", e)));
        op.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle_op_op", e)));
        pol.truncate(n_pol);
        op.truncate(n_op);
        let mut batches: Vec<(Task, &[&PairedSample])> = pol
            .chunks(cfg.batch_size)
            .map(|b| (Task::OpPol, b))
            .chain(op.chunks(cfg.batch_size).map(|b| (Task::OpOp, b)))
            .collect();
        batches.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "interleave", e)));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", e));

        let lr = adam.lr;
        let mut sums = [(0.0, 0usize); 2];
        for (task, batch) in &batches {
            model.params.zero_grads();
            let loss = batch_step(&mut model, batch, &mut dropout_rng, convert)?;
            adam.step(&mut model.params);
            let slot = &mut sums[(*task == Task::OpOp) as usize];
            slot.0 += loss;
            slot.1 += 1;
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let n_batches = batches.len().max(1) as f64;
        let train_loss = (sums[0].0 + sums[1].0) / n_batches;

        let (mut val_pol, mut val_op) = (None, None);
        let mut is_best = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            val_pol = eval::split_loss(&model, &data.val_op_pol, convert)?;
            val_op = eval::split_loss(&model, &data.val_op_op, convert)?;
            let monitored = val_pol.or(mean(sums[0])).unwrap_or(train_loss);
            if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
                best = Some((monitored, model.clone()));
                is_best = true;
            }
            adam.lr = sched.step(monitored);
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train_op_pol: mean(sums[0]),
            train_op_op: mean(sums[1]),
            val_op_pol: val_pol,
            val_op_op: val_op,
            best: is_best,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if cfg.verbose {
            println!(
                "[{}] epoch {epoch:>3}  lr {lr:.2e}  train {train_loss:.5}  val op_pol {}  val op_op {}  {:.1}s",
                model.config().variant,
                val_pol.map_or("-".into(), |v| format!("{v:.5}")),
                val_op.map_or("-".into(), |v| format!("{v:.5}")),
                record.wall_s
            );
        }
        history.records.push(record);
        if is_best {
            if let Some(dir) = out {
                let tm = TrainedModel::new(model.clone(), data.stats, epoch);
                save_trained(&dir.join("best.ckpt"), &tm, None)?;
            }
        }
    }
    if let Some(dir) = out {
        history.write_csv(&dir.join("history.csv"))?;
    }
    let best_epoch = history.best().map_or(cfg.epochs, |r| r.epoch);
    let (_, best_model) = best.expect("at least one evaluated epoch");
    Ok(TrainOutcome {
        best: TrainedModel::new(best_model, data.stats, best_epoch),
        last: model,
        history,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_counts_follow_ratio_and_cap() {
        let mut c = TrainConfig::default();
        assert_eq!(epoch_counts(&c, 30, 10), (30, 10));
        c.mix_ratio = Some(0.0);
        assert_eq!(epoch_counts(&c, 30, 10), (30, 0));
        c.samples_per_epoch = Some(8);
        c.mix_ratio = Some(0.25);
        assert_eq!(epoch_counts(&c, 30, 10), (6, 2));
        c.mix_ratio = None;
        assert_eq!(epoch_counts(&c, 30, 10), (6, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { mix_ratio: Some(1.5), ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                lr: 1e-4,
                train_loss: 0.5,
                train_op_pol: Some(0.5),
                train_op_op: None,
                val_op_pol: Some(0.25),
                val_op_op: None,
                best: true,
                wall_s: 3.0,
            }],
        };
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,1e-4,5.000000000e-1,5.000000000e-1,,2.500000000e-1,,1");
    }
}
