use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    CellState, DegradationRates, LoadProfile, OperationalRecord, PolProtocol, PolRecord, Series,
};
use crate::error::{Error, Result};

/// Additive i.i.d. Gaussian measurement noise; a zero sigma draws nothing.
struct Noise {
    rng: ChaCha8Rng,
    v: Option<Normal<f64>>,
    j: Option<Normal<f64>>,
}

impl Noise {
    fn new(seed: u64, sigma_v: f64, sigma_j: f64) -> Self {
        let make = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("sigma is finite"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            v: make(sigma_v),
            j: make(sigma_j),
        }
    }

    fn voltage(&mut self) -> f64 {
        match &self.v {
            Some(d) => d.sample(&mut self.rng),
            None => 0.0,
        }
    }

    fn current(&mut self) -> f64 {
        match &self.j {
            Some(d) => d.sample(&mut self.rng),
            None => 0.0,
        }
    }
}

/// Runs `n` voltage-controlled cycles starting from `state` at rest.
///
/// Each cycle holds `v_high` then `v_low` for `hold_s` each; the current
/// relaxes toward the steady-state current of the commanded voltage with an
/// explicit Euler step per sample. Degradation advances by one cycle after
/// every cycle. Returns the record and the state after the last cycle.
pub fn simulate_ast_cycles(
    state: &CellState,
    profile: &LoadProfile,
    rates: &DegradationRates,
    n: u64,
    seed: u64,
) -> Result<(OperationalRecord, CellState)> {
    profile.validate()?;
    if n == 0 {
        return Err(Error::Config("simulate_ast_cycles needs at least one cycle".into()));
    }
    let hold = profile.samples_per_hold();
    let total = n as usize * 2 * hold;
    let alpha = 1.0 / (profile.sample_hz * state.params.tau);
    let mut noise = Noise::new(seed, state.params.noise_sigma_v, state.params.noise_sigma_j);
    let mut current = Vec::with_capacity(total);
    let mut voltage = Vec::with_capacity(total);
    let mut cell = *state;
    let mut j = 0.0;
    for _ in 0..n {
        for v_cmd in [profile.v_high, profile.v_low] {
            let target = cell.steady_state_current(v_cmd)?;
            for _ in 0..hold {
                j += alpha * (target - j);
                current.push(j + noise.current());
                voltage.push(v_cmd + noise.voltage());
            }
        }
        cell = cell.apply_degradation(1, rates);
    }
    let record = OperationalRecord {
        first_cycle: state.cycles + 1,
        last_cycle: state.cycles + n,
        series: Series {
            sample_hz: profile.sample_hz,
            current,
            voltage,
        },
    };
    Ok((record, cell))
}

/// Runs a current-controlled polarization test. The current channel is the
/// commanded staircase; the voltage relaxes toward the steady-state voltage
/// of each level. The cell state is not advanced.
pub fn simulate_polarization_test(
    state: &CellState,
    protocol: &PolProtocol,
    seed: u64,
) -> Result<PolRecord> {
    protocol.validate()?;
    let staircase = protocol.staircase();
    let alpha = 1.0 / (protocol.sample_hz * state.params.tau);
    let mut noise = Noise::new(seed, state.params.noise_sigma_v, 0.0);
    let targets = protocol
        .levels
        .iter()
        .map(|&j| state.steady_state_voltage(j))
        .collect::<Result<Vec<f64>>>()?;
    let per = protocol.samples_per_level();
    let mut v = state.params.e_ocv;
    let mut voltage = Vec::with_capacity(staircase.len());
    for k in 0..staircase.len() {
        v += alpha * (targets[k / per] - v);
        voltage.push(v + noise.voltage());
    }
    Ok(PolRecord {
        cycle_index: state.cycles,
        series: Series {
            sample_hz: protocol.sample_hz,
            current: staircase,
            voltage,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellsim::{CellParams, ProfileKind};

    fn quiet() -> CellState {
        CellState::new(CellParams {
            noise_sigma_v: 0.0,
            noise_sigma_j: 0.0,
            ..CellParams::default()
        })
        .unwrap()
    }

    fn hold(v: f64, hold_s: f64) -> LoadProfile {
        LoadProfile {
            kind: ProfileKind::LoadUnload,
            v_low: v,
            v_high: v,
            hold_s,
            sample_hz: 10.0,
        }
    }

    #[test]
    fn step_response_settles() {
        let s = quiet();
        // one cycle = 2 holds of 10 s = 20 s = 10 tau
        let (rec, _) = simulate_ast_cycles(&s, &hold(1.9, 10.0), &DegradationRates::NONE, 1, 0).unwrap();
        let target = s.steady_state_current(1.9).unwrap();
        let last = *rec.series.current.last().unwrap();
        assert!((last - target).abs() / target < 0.01);
        // five time constants in: the first hold's final sample
        let at_5tau = rec.series.current[99];
        assert!((at_5tau - target).abs() / target < 0.01);
    }

    #[test]
    fn degenerate_profile_is_flat_after_transient() {
        let s = quiet();
        let (rec, _) = simulate_ast_cycles(&s, &hold(1.7, 30.0), &DegradationRates::NONE, 2, 0).unwrap();
        // 20 tau in, the lag residual is below e^-20 of the step
        let tail = &rec.series.current[400..];
        let first = tail[0];
        assert!(tail.iter().all(|&j| (j - first).abs() < 1e-7 * first));
        assert!(rec.series.voltage.iter().all(|&v| v == 1.7));
    }

    #[test]
    fn ast_length_arithmetic() {
        let s = CellState::new(CellParams::default()).unwrap();
        let (rec, after) =
            simulate_ast_cycles(&s, &LoadProfile::on_off(), &DegradationRates::OHMIC, 3, 1).unwrap();
        assert_eq!(rec.series.len(), 600);
        assert_eq!(rec.series.voltage.len(), 600);
        assert_eq!((rec.first_cycle, rec.last_cycle), (1, 3));
        assert_eq!(after.cycles, 3);
    }

    #[test]
    fn ast_needs_cycles() {
        let s = quiet();
        assert!(simulate_ast_cycles(&s, &LoadProfile::on_off(), &DegradationRates::NONE, 0, 0).is_err());
    }

    #[test]
    fn off_phase_draws_no_current() {
        let s = quiet();
        let (rec, _) =
            simulate_ast_cycles(&s, &LoadProfile::on_off(), &DegradationRates::NONE, 1, 0).unwrap();
        // after 10 s at 0 V the current has decayed by (1 - 0.05)^100
        assert!(rec.series.current[199] < 0.01 * rec.series.current[99]);
    }

    #[test]
    fn polarization_length_and_steady_values() {
        let s = quiet().apply_degradation(500, &DegradationRates::KINETIC);
        let p = PolProtocol::default();
        let rec = simulate_polarization_test(&s, &p, 3).unwrap();
        assert_eq!(rec.series.len(), 12_000);
        assert_eq!(rec.cycle_index, 500);
        let per = p.samples_per_level();
        let win = p.steady_window_samples();
        for (i, &j) in p.levels.iter().enumerate() {
            let end = (i + 1) * per;
            let mean: f64 = rec.series.voltage[end - win..end].iter().sum::<f64>() / win as f64;
            let v = s.steady_state_voltage(j).unwrap();
            assert!((mean - v).abs() / v < 1e-3);
            assert!(rec.series.current[end - 1] == j);
        }
    }

    #[test]
    fn polarization_rejects_empty_protocol() {
        let p = PolProtocol {
            levels: vec![],
            ..PolProtocol::default()
        };
        assert!(simulate_polarization_test(&quiet(), &p, 0).is_err());
    }

    #[test]
    fn noise_free_records_ignore_seed() {
        let s = quiet();
        let a = simulate_polarization_test(&s, &PolProtocol::default(), 1).unwrap();
        let b = simulate_polarization_test(&s, &PolProtocol::default(), 2).unwrap();
        assert_eq!(a, b);
        let prof = LoadProfile::load_unload();
        let (x, _) = simulate_ast_cycles(&s, &prof, &DegradationRates::OHMIC, 2, 5).unwrap();
        let (y, _) = simulate_ast_cycles(&s, &prof, &DegradationRates::OHMIC, 2, 6).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn noisy_records_depend_on_seed_deterministically() {
        let s = CellState::new(CellParams::default()).unwrap();
        let prof = LoadProfile::load_unload();
        let (x, _) = simulate_ast_cycles(&s, &prof, &DegradationRates::OHMIC, 2, 5).unwrap();
        let (y, _) = simulate_ast_cycles(&s, &prof, &DegradationRates::OHMIC, 2, 5).unwrap();
        let (z, _) = simulate_ast_cycles(&s, &prof, &DegradationRates::OHMIC, 2, 6).unwrap();
        assert_eq!(x, y);
        assert_ne!(x, z);
    }
}
