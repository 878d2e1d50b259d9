//! Experiment configuration: one TOML file holds every knob.

use std::path::{Path, PathBuf};

use pemvc_core::cellsim::{CellParams, DegradationRates, LoadProfile, PolProtocol, RunConfig};
use pemvc_core::datapipe::PairOptions;
use pemvc_core::model::ModelConfig;
use pemvc_core::seed::derive_seed;
use pemvc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Root seed; every stage seed is derived from it and the run index.
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cell: CellParams,
    #[serde(default)]
    pub protocol: PolProtocol,
    pub checkpoints: Checkpoints,
    #[serde(default)]
    pub pairs: PairOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub runs: Vec<RunEntry>,
}

/// Either an explicit list or `{ every, count }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Checkpoints {
    List(Vec<u64>),
    Every { every: u64, count: u64 },
}

impl Checkpoints {
    pub fn cycles(&self) -> Vec<u64> {
        match self {
            Checkpoints::List(v) => v.clone(),
            Checkpoints::Every { every, count } => (1..=*count).map(|k| k * every).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub name: String,
    pub profile: ProfileSpec,
    pub rates: RatesSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    /// `on_off` or `load_unload`.
    Preset(String),
    Custom(LoadProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatesSpec {
    /// `none`, `ohmic` or `kinetic`.
    Preset(String),
    Custom(DegradationRates),
}

impl ProfileSpec {
    fn resolve(&self) -> Result<LoadProfile, CliError> {
        match self {
            ProfileSpec::Custom(p) => Ok(*p),
            ProfileSpec::Preset(s) => match s.as_str() {
                "on_off" => Ok(LoadProfile::on_off()),
                "load_unload" => Ok(LoadProfile::load_unload()),
                _ => Err(CliError::config(format!("unknown load profile {s:?} (on_off, load_unload)"))),
            },
        }
    }
}

impl RatesSpec {
    fn resolve(&self) -> Result<DegradationRates, CliError> {
        match self {
            RatesSpec::Custom(r) => Ok(*r),
            RatesSpec::Preset(s) => DegradationRates::preset(s)
                .ok_or_else(|| CliError::config(format!("unknown degradation preset {s:?} (none, ohmic, kinetic)"))),
        }
    }
}

/// Seeds for one run. The pair seed hangs off the run seed so that
/// `prepare` can recover it from a run directory alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub run: u64,
    pub init: u64,
    pub train: u64,
}

pub fn run_seeds(root: u64, index: usize) -> RunSeeds {
    let i = index as u64;
    RunSeeds {
        run: derive_seed(root, "run", i),
        init: derive_seed(root, "init", i),
        train: derive_seed(root, "train", i),
    }
}

pub fn pair_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, "pairs", 0)
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(format!("{}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs.is_empty() {
            return Err(CliError::config("no [[runs]] given"));
        }
        if self.train.seed != 0 || self.pairs.seed != 0 {
            return Err(CliError::config(
                "set the top-level `seed`; train.seed and pairs.seed are derived from it",
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            if r.name.is_empty() || r.name.contains(['/', '\\']) || !names.insert(&r.name) {
                return Err(CliError::config(format!("run name {:?} is empty, repeated or not a plain name", r.name)));
            }
            self.run_config(i)?.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.pairs.windows_per_pair == 0 || self.pairs.windows_per_segment == 0 {
            return Err(CliError::config("pairs.windows_per_pair and pairs.windows_per_segment must be positive"));
        }
        Ok(())
    }

    pub fn run_config(&self, index: usize) -> Result<RunConfig, CliError> {
        let entry = self
            .runs
            .get(index)
            .ok_or_else(|| CliError::config(format!("run index {index} out of range ({} runs)", self.runs.len())))?;
        Ok(RunConfig {
            cell: self.cell,
            rates: entry.rates.resolve()?,
            profile: entry.profile.resolve()?,
            protocol: self.protocol.clone(),
            checkpoints: self.checkpoints.cycles(),
            seed: run_seeds(self.seed, index).run,
        })
    }

    pub fn pair_options(&self, run_seed: u64) -> PairOptions {
        PairOptions { seed: pair_seed(run_seed), ..self.pairs }
    }

    pub fn model_config(&self, variant: &str) -> ModelConfig {
        ModelConfig { variant: variant.into(), ..self.model.clone() }
    }

    pub fn train_config(&self, index: usize) -> TrainConfig {
        TrainConfig { seed: run_seeds(self.seed, index).train, ..self.train.clone() }
    }
}
