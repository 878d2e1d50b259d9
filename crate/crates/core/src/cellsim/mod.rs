//! Synthetic PEM electrolyzer cell.
//!
//! The steady-state polarization law is
//!
//! ```text
//! V(j) = e_ocv + tafel_a * asinh(j / (2 j0)) + r_ohm * j - c_mt * ln(1 - j / j_lim)
//! ```
//!
//! Degradation grows the ohmic resistance linearly and decays the exchange
//! current density exponentially with the cumulative number of AST cycles.
//! Transients follow a first-order lag with time constant `tau`.

mod run;
mod sim;

pub use run::{generate_run, PolFile, RunConfig, RunDataset, SegmentFile, RUN_MANIFEST};
pub use sim::{simulate_ast_cycles, simulate_polarization_test};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel sampling rate used throughout the testbench.
pub const DEFAULT_SAMPLE_HZ: f64 = 10.0;

/// Relative margin below `j_lim` used as the bisection upper bound.
const J_LIM_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellParams {
    /// Open-circuit voltage, V.
    pub e_ocv: f64,
    /// Activation overpotential scale, V.
    pub tafel_a: f64,
    /// Exchange current density, A/cm².
    pub j0: f64,
    /// Area-specific ohmic resistance, Ω·cm².
    pub r_ohm: f64,
    /// Limiting current density, A/cm².
    pub j_lim: f64,
    /// Mass-transport overpotential scale, V.
    pub c_mt: f64,
    /// First-order response time constant, s.
    pub tau: f64,
    pub noise_sigma_v: f64,
    pub noise_sigma_j: f64,
}

impl Default for CellParams {
    fn default() -> Self {
        Self {
            e_ocv: 1.23,
            tafel_a: 0.06,
            j0: 1e-3,
            r_ohm: 0.15,
            j_lim: 6.0,
            c_mt: 0.01,
            tau: 2.0,
            noise_sigma_v: 0.002,
            noise_sigma_j: 0.005,
        }
    }
}

impl CellParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.e_ocv,
            self.tafel_a,
            self.j0,
            self.r_ohm,
            self.j_lim,
            self.c_mt,
            self.tau,
            self.noise_sigma_v,
            self.noise_sigma_j,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("cell parameters must be finite".into()));
        }
        if self.j0 <= 0.0 || self.r_ohm < 0.0 || self.tau <= 0.0 || self.j_lim <= 0.0 {
            return Err(Error::Config(format!(
                "cell parameters violate j0 > 0, r_ohm >= 0, tau > 0, j_lim > 0: {self:?}"
            )));
        }
        if self.tafel_a <= 0.0 || self.c_mt < 0.0 {
            return Err(Error::Config("tafel_a must be > 0 and c_mt >= 0".into()));
        }
        if self.noise_sigma_v < 0.0 || self.noise_sigma_j < 0.0 {
            return Err(Error::Config("noise standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    /// Steady-state cell voltage at current density `j`.
    pub fn steady_state_voltage(&self, j: f64) -> Result<f64> {
        if !(j >= 0.0 && j < self.j_lim) {
            return Err(Error::Domain(format!(
                "current density {j} outside [0, {})",
                self.j_lim
            )));
        }
        Ok(self.e_ocv
            + self.tafel_a * (j / (2.0 * self.j0)).asinh()
            + self.r_ohm * j
            - self.c_mt * (1.0 - j / self.j_lim).ln())
    }

    /// Current density drawn when the cell is held at voltage `v`; zero at or
    /// below open circuit.
    pub fn steady_state_current(&self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite voltage {v}")));
        }
        if v <= self.e_ocv {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = self.j_lim * (1.0 - J_LIM_MARGIN);
        if self.steady_state_voltage(hi)? <= v {
            return Ok(hi);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let vm = self.steady_state_voltage(mid)?;
            if (vm - v).abs() < 1e-9 {
                return Ok(mid);
            }
            if vm < v {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Per-cycle degradation rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRates {
    /// Fractional ohmic-resistance growth per cycle.
    pub k_r: f64,
    /// Exponential exchange-current decay per cycle.
    pub k_j: f64,
}

impl DegradationRates {
    pub const NONE: DegradationRates = DegradationRates { k_r: 0.0, k_j: 0.0 };

    /// Resistance-dominated aging (membrane / contact losses).
    pub const OHMIC: DegradationRates = DegradationRates {
        k_r: 2.0e-4,
        k_j: 1.5e-4,
    };

    /// Kinetics-dominated aging (catalyst loss).
    pub const KINETIC: DegradationRates = DegradationRates {
        k_r: 6.0e-5,
        k_j: 8.0e-4,
    };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::NONE),
            "ohmic" => Some(Self::OHMIC),
            "kinetic" => Some(Self::KINETIC),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_r >= 0.0 && self.k_j >= 0.0 && self.k_r.is_finite() && self.k_j.is_finite()) {
            return Err(Error::Config(format!("degradation rates must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    /// Current (degraded) parameters.
    pub params: CellParams,
    /// Beginning-of-life parameters.
    pub base: CellParams,
    /// Cumulative AST cycles applied.
    pub cycles: u64,
}

impl CellState {
    pub fn new(base: CellParams) -> Result<Self> {
        base.validate()?;
        Ok(Self {
            params: base,
            base,
            cycles: 0,
        })
    }

    pub fn steady_state_voltage(&self, j: f64) -> Result<f64> {
        self.params.steady_state_voltage(j)
    }

    pub fn steady_state_current(&self, v: f64) -> Result<f64> {
        self.params.steady_state_current(v)
    }

    /// The state after `n_cycles` more AST cycles. Parameters are a closed
    /// form of the cumulative count, so applying cycles in several steps is
    /// identical to applying them at once.
    pub fn apply_degradation(&self, n_cycles: u64, rates: &DegradationRates) -> Self {
        let cycles = self.cycles + n_cycles;
        let c = cycles as f64;
        let mut params = self.params;
        params.r_ohm = self.base.r_ohm * (1.0 + rates.k_r * c);
        params.j0 = self.base.j0 * (-rates.k_j * c).exp();
        Self {
            params,
            base: self.base,
            cycles,
        }
    }
}

/// Command waveform of a voltage-controlled AST.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    OnOff,
    LoadUnload,
}

/// Square-wave voltage cycling: `hold_s` at `v_high`, then `hold_s` at `v_low`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadProfile {
    pub kind: ProfileKind,
    pub v_low: f64,
    pub v_high: f64,
    pub hold_s: f64,
    #[serde(default = "default_hz")]
    pub sample_hz: f64,
}

fn default_hz() -> f64 {
    DEFAULT_SAMPLE_HZ
}

impl LoadProfile {
    pub fn on_off() -> Self {
        Self {
            kind: ProfileKind::OnOff,
            v_low: 0.0,
            v_high: 2.0,
            hold_s: 10.0,
            sample_hz: DEFAULT_SAMPLE_HZ,
        }
    }

    pub fn load_unload() -> Self {
        Self {
            kind: ProfileKind::LoadUnload,
            v_low: 1.45,
            v_high: 2.0,
            hold_s: 10.0,
            sample_hz: DEFAULT_SAMPLE_HZ,
        }
    }

    /// Allows `v_low == v_high` (a constant hold); the stricter
    /// `v_low < v_high` is enforced by [`LoadProfile::validate_cycling`].
    pub fn validate(&self) -> Result<()> {
        if !(self.v_low <= self.v_high && self.hold_s > 0.0 && self.sample_hz > 0.0) {
            return Err(Error::Config(format!("invalid load profile {self:?}")));
        }
        samples_for(self.hold_s, self.sample_hz)?;
        Ok(())
    }

    pub fn validate_cycling(&self) -> Result<()> {
        self.validate()?;
        if self.v_low >= self.v_high {
            return Err(Error::Config("load profile needs v_low < v_high".into()));
        }
        Ok(())
    }

    pub fn samples_per_hold(&self) -> usize {
        (self.hold_s * self.sample_hz).round() as usize
    }

    pub fn samples_per_cycle(&self) -> usize {
        2 * self.samples_per_hold()
    }
}

/// Current-controlled staircase used for polarization tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolProtocol {
    /// Strictly increasing current densities, A/cm².
    pub levels: Vec<f64>,
    pub hold_s: f64,
    pub sample_hz: f64,
    pub steady_window_s: f64,
}

impl Default for PolProtocol {
    fn default() -> Self {
        let levels = (0..10).map(|i| 0.2 + (3.0 - 0.2) * i as f64 / 9.0).collect();
        Self {
            levels,
            hold_s: 120.0,
            sample_hz: DEFAULT_SAMPLE_HZ,
            steady_window_s: 30.0,
        }
    }
}

fn samples_for(seconds: f64, hz: f64) -> Result<usize> {
    let n = seconds * hz;
    if (n - n.round()).abs() > 1e-9 || n < 1.0 {
        return Err(Error::Config(format!(
            "{seconds} s at {hz} Hz is not a positive whole number of samples"
        )));
    }
    Ok(n.round() as usize)
}

impl PolProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("polarization protocol has no levels".into()));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) || self.levels[0] < 0.0 {
            return Err(Error::Config(
                "polarization levels must be non-negative and strictly increasing".into(),
            ));
        }
        if !(self.sample_hz > 0.0 && self.hold_s > 0.0) {
            return Err(Error::Config("hold_s and sample_hz must be positive".into()));
        }
        samples_for(self.hold_s, self.sample_hz)?;
        let window = samples_for(self.steady_window_s, self.sample_hz)?;
        if window >= self.samples_per_level() {
            return Err(Error::Config("steady_window_s must be shorter than hold_s".into()));
        }
        Ok(())
    }

    pub fn samples_per_level(&self) -> usize {
        (self.hold_s * self.sample_hz).round() as usize
    }

    pub fn steady_window_samples(&self) -> usize {
        (self.steady_window_s * self.sample_hz).round() as usize
    }

    /// Total samples in one test.
    pub fn len(&self) -> usize {
        self.levels.len() * self.samples_per_level()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The commanded current density at every sample.
    pub fn staircase(&self) -> Vec<f64> {
        let per = self.samples_per_level();
        self.levels
            .iter()
            .flat_map(|&j| std::iter::repeat_n(j, per))
            .collect()
    }
}

/// Two-channel record sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub sample_hz: f64,
    /// Current density, A/cm².
    pub current: Vec<f64>,
    /// Cell voltage, V.
    pub voltage: Vec<f64>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

/// Voltage-controlled AST data for cycles `first_cycle..=last_cycle`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalRecord {
    pub first_cycle: u64,
    pub last_cycle: u64,
    pub series: Series,
}

/// A polarization test taken after `cycle_index` AST cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct PolRecord {
    pub cycle_index: u64,
    pub series: Series,
}
