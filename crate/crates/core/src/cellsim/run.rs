//! A full degradation run and its on-disk layout.
//!
//! A run directory holds `run.json` (the config plus one entry per file) and
//! one CSV per polarization test or operational segment with header
//! `t_s,current_A_cm2,voltage_V`. Values are written in shortest round-trip
//! form so reading a directory back is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    simulate_ast_cycles, simulate_polarization_test, CellParams, CellState, DegradationRates,
    LoadProfile, OperationalRecord, PolProtocol, PolRecord, Series,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const RUN_MANIFEST: &str = "run.json";
const CSV_HEADER: [&str; 3] = ["t_s", "current_A_cm2", "voltage_V"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub cell: CellParams,
    pub rates: DegradationRates,
    pub profile: LoadProfile,
    #[serde(default)]
    pub protocol: PolProtocol,
    /// Cycle counts after which a polarization test is taken, strictly
    /// increasing and positive. Cycle 0 is always tested.
    pub checkpoints: Vec<u64>,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        self.rates.validate()?;
        self.profile.validate_cycling()?;
        self.protocol.validate()?;
        if let Some(&top) = self.protocol.levels.last() {
            if top >= self.cell.j_lim {
                return Err(Error::Config(format!(
                    "protocol level {top} A/cm² is not below j_lim {}",
                    self.cell.j_lim
                )));
            }
        }
        let mut prev = 0;
        for &c in &self.checkpoints {
            if c <= prev {
                return Err(Error::Config(format!(
                    "checkpoints must be positive and strictly increasing, got {:?}",
                    self.checkpoints
                )));
            }
            prev = c;
        }
        Ok(())
    }
}

/// Manifest entry for one polarization test file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolFile {
    pub cycle_index: u64,
    pub seed: u64,
    pub file: String,
}

/// Manifest entry for one operational segment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFile {
    pub first_cycle: u64,
    pub last_cycle: u64,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    config: RunConfig,
    pol_tests: Vec<PolFile>,
    segments: Vec<SegmentFile>,
}

/// Polarization tests at cycle 0 and every checkpoint, and the operational
/// segment leading up to each checkpoint: `segments[i]` precedes
/// `pol_tests[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDataset {
    pub config: RunConfig,
    pub pol_tests: Vec<PolRecord>,
    pub segments: Vec<OperationalRecord>,
}

fn pol_seed(root: u64, i: usize) -> u64 {
    derive_seed(root, "pol", i as u64)
}

fn op_seed(root: u64, i: usize) -> u64 {
    derive_seed(root, "op", i as u64)
}

pub fn generate_run(config: &RunConfig) -> Result<RunDataset> {
    config.validate()?;
    let mut state = CellState::new(config.cell)?;
    let mut pol_tests = vec![simulate_polarization_test(&state, &config.protocol, pol_seed(config.seed, 0))?];
    let mut segments = Vec::with_capacity(config.checkpoints.len());
    for (i, &c) in config.checkpoints.iter().enumerate() {
        let n = c - state.cycles;
        let (record, next) = simulate_ast_cycles(&state, &config.profile, &config.rates, n, op_seed(config.seed, i))?;
        state = next;
        segments.push(record);
        pol_tests.push(simulate_polarization_test(&state, &config.protocol, pol_seed(config.seed, i + 1))?);
    }
    Ok(RunDataset {
        config: config.clone(),
        pol_tests,
        segments,
    })
}

fn pol_name(cycle: u64) -> String {
    format!("pol_c{cycle:06}.csv")
}

fn op_name(first: u64, last: u64) -> String {
    format!("op_c{first:06}-{last:06}.csv")
}

fn write_series(path: &Path, s: &Series) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for k in 0..s.len() {
        let t = k as f64 / s.sample_hz;
        w.write_record([t.to_string(), s.current[k].to_string(), s.voltage[k].to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_series(path: &Path, sample_hz: f64) -> Result<Series> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let mut current = Vec::new();
    let mut voltage = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad value in row {}", row + 2)))
        };
        current.push(field(1)?);
        voltage.push(field(2)?);
    }
    Ok(Series {
        sample_hz,
        current,
        voltage,
    })
}

impl RunDataset {
    /// Writes the run into `dir`, creating it if needed. Existing files with
    /// the same names are overwritten.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let seed = self.config.seed;
        let mut pol_files = Vec::new();
        for (i, p) in self.pol_tests.iter().enumerate() {
            let file = pol_name(p.cycle_index);
            write_series(&dir.join(&file), &p.series)?;
            pol_files.push(PolFile {
                cycle_index: p.cycle_index,
                seed: pol_seed(seed, i),
                file,
            });
        }
        let mut seg_files = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            let file = op_name(s.first_cycle, s.last_cycle);
            write_series(&dir.join(&file), &s.series)?;
            seg_files.push(SegmentFile {
                first_cycle: s.first_cycle,
                last_cycle: s.last_cycle,
                seed: op_seed(seed, i),
                file,
            });
        }
        let manifest = RunManifest {
            config: self.config.clone(),
            pol_tests: pol_files,
            segments: seg_files,
        };
        let path = dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        m.config.validate()?;
        if m.pol_tests.len() != m.config.checkpoints.len() + 1 || m.segments.len() != m.config.checkpoints.len() {
            return Err(Error::format(&path, "file list does not match checkpoints"));
        }
        let pol_hz = m.config.protocol.sample_hz;
        let op_hz = m.config.profile.sample_hz;
        let pol_tests = m
            .pol_tests
            .iter()
            .map(|f| {
                Ok(PolRecord {
                    cycle_index: f.cycle_index,
                    series: read_series(&dir.join(&f.file), pol_hz)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let segments = m
            .segments
            .iter()
            .map(|f| {
                Ok(OperationalRecord {
                    first_cycle: f.first_cycle,
                    last_cycle: f.last_cycle,
                    series: read_series(&dir.join(&f.file), op_hz)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: m.config,
            pol_tests,
            segments,
        })
    }

    /// Cycle index of every polarization test, starting with 0.
    pub fn test_cycles(&self) -> Vec<u64> {
        self.pol_tests.iter().map(|p| p.cycle_index).collect()
    }
}
