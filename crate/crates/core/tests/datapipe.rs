use pemvc_core::cellsim::{
    generate_run, CellParams, DegradationRates, LoadProfile, PolProtocol, RunConfig, RunDataset,
};
use pemvc_core::datapipe::{
    fit_norm_stats, make_op_op_pairs, make_op_pol_pairs, prepare, split_checkpoints, tile_starts,
    Channel, NormStats, PairOptions, PreparedData, SplitPlan, Task, N_CHANNELS, SEQ_LEN,
};
use proptest::prelude::*;

fn run(checkpoints: Vec<u64>, noise: bool) -> RunDataset {
    let mut cell = CellParams::default();
    if !noise {
        cell.noise_sigma_j = 0.0;
        cell.noise_sigma_v = 0.0;
    }
    generate_run(&RunConfig {
        cell,
        rates: DegradationRates::OHMIC,
        profile: LoadProfile::on_off(),
        protocol: PolProtocol::default(),
        checkpoints,
        seed: 3,
    })
    .unwrap()
}

fn opts(w: usize) -> PairOptions {
    PairOptions {
        windows_per_pair: w,
        windows_per_segment: 3,
        seed: 17,
    }
}

#[test]
fn one_window_one_checkpoint_gives_twelve_samples() {
    let r = run(vec![10], true);
    let plan = SplitPlan { train: vec![10], val: vec![] };
    let stats = fit_norm_stats(&[&r.segments[0].series]).unwrap();
    let s = make_op_pol_pairs(&r, &plan, &stats, &opts(1), false).unwrap();
    assert_eq!(s.len(), 12);
    assert_eq!(s[11].valid_len, 736);
    assert!(s[..11].iter().all(|x| x.valid_len == SEQ_LEN));
}

#[test]
fn padded_channels_are_zero() {
    let data = prepare(&run(vec![10, 20, 30], true), &opts(2)).unwrap();
    for s in data.train_op_pol.iter().chain(&data.val_op_pol) {
        assert!(s.x_dec.iter().skip(Channel::Voltage as usize).step_by(N_CHANNELS).all(|&v| v == 0.0));
        assert_eq!(s.task, Task::OpPol);
    }
    for s in data.train_op_op.iter().chain(&data.val_op_op) {
        assert!(s.x_dec.iter().skip(Channel::Current as usize).step_by(N_CHANNELS).all(|&v| v == 0.0));
        assert_eq!(s.task, Task::OpOp);
    }
}

#[test]
fn decoder_current_is_the_commanded_staircase() {
    let r = run(vec![10, 20, 30], true);
    let data = prepare(&r, &opts(1)).unwrap();
    let stair = r.config.protocol.staircase();
    for s in &data.train_op_pol {
        for k in 0..s.valid_len {
            let z = s.x_dec[k * N_CHANNELS] as f64;
            let j = data.stats.denormalize_value(z, Channel::Current);
            let want = stair[s.dec_offset + k];
            assert!((j - want).abs() <= 4.0 * f32::EPSILON as f64 * data.stats.std[0].max(want), "{j} vs {want}");
        }
    }
}

#[test]
fn splits_do_not_leak() {
    let r = run((1..=7).map(|k| 10 * k).collect(), true);
    let data = prepare(&r, &opts(2)).unwrap();
    assert_eq!(data.plan.val, vec![30, 60]);
    for s in data.train_op_pol.iter().chain(&data.train_op_op) {
        assert!(!data.plan.is_val(s.cycle_index));
    }
    for s in data.val_op_pol.iter().chain(&data.val_op_op) {
        assert!(data.plan.is_val(s.cycle_index));
    }
}

#[test]
fn decoder_windows_tile_the_test_exactly() {
    let r = run(vec![10], true);
    let plan = SplitPlan { train: vec![10], val: vec![] };
    let stats = fit_norm_stats(&[&r.segments[0].series]).unwrap();
    let s = make_op_pol_pairs(&r, &plan, &stats, &opts(1), false).unwrap();
    let rebuilt: Vec<f32> = s.iter().flat_map(|x| x.y[..x.valid_len].iter().copied()).collect();
    let want: Vec<f32> = r.pol_tests[1]
        .series
        .voltage
        .iter()
        .map(|&v| stats.normalize_value(v, Channel::Voltage) as f32)
        .collect();
    assert_eq!(rebuilt, want);
    assert_eq!(s.iter().map(|x| x.dec_offset).collect::<Vec<_>>(), tile_starts(12_000));
}

#[test]
fn coinciding_op_op_windows_share_voltage() {
    // a segment of exactly one window forces every offset to 0
    let mut r = run(vec![10], true);
    r.segments[0].series.current.truncate(SEQ_LEN);
    r.segments[0].series.voltage.truncate(SEQ_LEN);
    let plan = SplitPlan { train: vec![10], val: vec![] };
    let stats = fit_norm_stats(&[&r.segments[0].series]).unwrap();
    for s in make_op_op_pairs(&r, &plan, &stats, &opts(1), false).unwrap() {
        assert_eq!(s.window_offset, s.dec_offset);
        for t in 0..SEQ_LEN {
            assert_eq!(s.x_enc[t * 2 + 1], s.x_dec[t * 2 + 1]);
        }
    }
}

#[test]
fn short_segments_are_rejected() {
    let mut r = run(vec![10], true);
    r.segments[0].series.current.truncate(SEQ_LEN - 1);
    r.segments[0].series.voltage.truncate(SEQ_LEN - 1);
    let plan = SplitPlan { train: vec![10], val: vec![] };
    let stats = NormStats { mean: [0.0; 2], std: [1.0; 2] };
    assert!(make_op_pol_pairs(&r, &plan, &stats, &opts(1), false).is_err());
    assert!(make_op_op_pairs(&r, &plan, &stats, &opts(1), false).is_err());
}

#[test]
fn pairing_is_deterministic_and_seeded() {
    let r = run(vec![10, 20], true);
    let a = prepare(&r, &opts(2)).unwrap();
    let b = prepare(&r, &opts(2)).unwrap();
    assert_eq!(a, b);
    let mut o = opts(2);
    o.seed = 18;
    let c = prepare(&r, &o).unwrap();
    let offs = |d: &PreparedData| d.train_op_op.iter().map(|s| s.window_offset).collect::<Vec<_>>();
    assert_ne!(offs(&a), offs(&c));
}

#[test]
fn validation_windows_do_not_depend_on_seed() {
    let r = run((1..=3).map(|k| 10 * k).collect(), true);
    let a = prepare(&r, &opts(3)).unwrap();
    let mut o = opts(3);
    o.seed = 999;
    let b = prepare(&r, &o).unwrap();
    assert_eq!(a.val_op_pol, b.val_op_pol);
    assert_eq!(a.val_op_op, b.val_op_op);
}

#[test]
fn shards_round_trip() {
    let data = prepare(&run(vec![10, 20, 30], true), &opts(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write_dir(dir.path()).unwrap();
    assert_eq!(PreparedData::read_dir(dir.path()).unwrap(), data);
    let bytes = std::fs::read(dir.path().join("val_op_op.bin")).unwrap();
    std::fs::write(dir.path().join("val_op_op.bin"), &bytes[..bytes.len() - 1]).unwrap();
    assert!(PreparedData::read_dir(dir.path()).is_err());
}

/// Welford's single-pass update, independent of the two-pass fit.
fn welford(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    (mean, (m2 / n).sqrt())
}

#[test]
fn stats_match_single_pass_oracle() {
    let r = run((1..=6).map(|k| 20 * k).collect(), true);
    let plan = split_checkpoints(&r.config.checkpoints).unwrap();
    let segs: Vec<_> = r
        .segments
        .iter()
        .filter(|s| !plan.is_val(s.last_cycle))
        .map(|s| &s.series)
        .collect();
    let st = fit_norm_stats(&segs).unwrap();
    let (mj, sj) = welford(segs.iter().flat_map(|s| s.current.iter().copied()));
    let (mv, sv) = welford(segs.iter().flat_map(|s| s.voltage.iter().copied()));
    for (a, b) in [(st.mean[0], mj), (st.std[0], sj), (st.mean[1], mv), (st.std[1], sv)] {
        assert!((a - b).abs() <= 1e-10 * b.abs(), "{a} vs {b}");
    }
    assert_eq!(prepare(&r, &opts(1)).unwrap().stats, st);
}

proptest! {
    #[test]
    fn normalize_round_trip(xs in prop::collection::vec(-10.0f64..10.0, 2..64),
                            m0 in -3.0f64..3.0, m1 in -3.0f64..3.0,
                            s0 in 1e-3f64..5.0, s1 in 1e-3f64..5.0) {
        let n = xs.len() / 2 * 2;
        let st = NormStats { mean: [m0, m1], std: [s0, s1] };
        let back = st.denormalize(&st.normalize(&xs[..n]));
        for (a, b) in back.iter().zip(&xs[..n]) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn mean_maps_to_zero(m0 in -3.0f64..3.0, s0 in 1e-6f64..5.0) {
        let st = NormStats { mean: [m0, 0.0], std: [s0, 1.0] };
        prop_assert_eq!(st.normalize_value(m0, Channel::Current), 0.0);
    }
}
