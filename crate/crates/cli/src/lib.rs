//! `pemvc`: simulate, prepare, train, evaluate and characterize from one
//! config file.

pub mod commands;
pub mod report;
pub mod spec;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::run;
pub use spec::RunSpec;

/// A core error tagged with the stage that raised it.
#[derive(Debug)]
pub struct CliError {
    pub stage: Vec<String>,
    pub source: pemvc_core::Error,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        pemvc_core::Error::Config(msg.into()).into()
    }

    pub fn context(mut self, stage: impl Into<String>) -> Self {
        self.stage.insert(0, stage.into());
        self
    }

    /// 2 config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        use pemvc_core::Error::*;
        match self.source {
            Config(_) => 2,
            Numerical(_) => 4,
            Data(_) | Domain(_) | Shape { .. } | Format { .. } | Io { .. } => 3,
        }
    }
}

impl From<pemvc_core::Error> for CliError {
    fn from(source: pemvc_core::Error) -> Self {
        Self { stage: Vec::new(), source }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stage {
            write!(f, "{s}: ")?;
        }
        write!(f, "{}", self.source)
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub trait Context<T> {
    fn stage(self, name: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn stage(self, name: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| e.into().context(name.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "pemvc", version, about = "Virtual polarization testing of a simulated PEM electrolyzer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one run: AST segments and polarization tests.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which `[[runs]]` entry to simulate.
        #[arg(long, default_value_t = 0)]
        run_index: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build paired samples, normalization statistics and the split.
    Prepare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Read `[pairs]` from this file; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model on prepared data.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = variant_parser())]
        model: String,
        #[arg(long)]
        out: PathBuf,
        /// Read `[model]` and `[train]` from this file; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seeds are derived as for this run of `reproduce`.
        #[arg(long, default_value_t = 0)]
        run_index: usize,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Per-task error of a checkpoint on both splits.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Refuse checkpoints whose model config differs from this file's.
        #[arg(long, requires = "model")]
        config: Option<PathBuf>,
        #[arg(long, requires = "config", value_parser = variant_parser())]
        model: Option<String>,
    },
    /// Virtual polarization test at one checkpoint of a run.
    PredictPol {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Position in the run's checkpoint list, from 0.
        #[arg(long)]
        checkpoint_index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = pemvc_core::characterize::DEFAULT_J_REF)]
        j_ref: f64,
    },
    /// Every run, both variants, one combined report.
    Reproduce {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

fn variant_parser() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(pemvc_core::model::variant_names())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pemvc_core::Error;

    #[test]
    fn exit_codes_and_stage_prefixes() {
        let e = CliError::from(Error::Numerical("loss is NaN".into())).context("train").context("run2/patch");
        assert_eq!(e.exit_code(), 4);
        assert_eq!(e.to_string(), "run2/patch: train: numerical abort: loss is NaN");
        assert_eq!(CliError::config("x").exit_code(), 2);
        assert_eq!(CliError::from(Error::Data("x".into())).exit_code(), 3);
        let io = Error::io("f", std::io::Error::other("gone"));
        assert_eq!(CliError::from(io).exit_code(), 3);
    }

    #[test]
    fn flags_override_config() {
        let o = TrainOverrides { epochs: Some(3), lr: Some(0.5), quiet: true, ..Default::default() };
        let cfg = o.apply(pemvc_core::training::TrainConfig { verbose: true, ..Default::default() });
        assert_eq!((cfg.epochs, cfg.lr, cfg.verbose, cfg.batch_size), (3, 0.5, false, 32));
    }
}
