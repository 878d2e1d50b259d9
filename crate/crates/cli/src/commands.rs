use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pemvc_core::cellsim::{generate_run, RunDataset};
use pemvc_core::characterize::{
    curve_mse, degradation_report, latent_swap, plot_curves_svg, virtual_test, write_curves_csv, DEFAULT_J_REF,
};
use pemvc_core::datapipe::{prepare, PairOptions, PreparedData};
use pemvc_core::model::{Model, ModelConfig};
use pemvc_core::training::{evaluate, load_trained, train, TrainConfig, TrainedModel};
use pemvc_core::Error;

use crate::report::{self, CheckpointError, CurveSummary, EvalSummary, Report, RunResult, VariantResult};
use crate::spec::{pair_seed, run_seeds, RunSpec};
use crate::{Cli, CliError, Command, Context, TrainOverrides};

/// Order in which `reproduce` trains the variants.
pub const VARIANTS: [&str; 2] = ["vanilla", "patch"];

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, run_index, seed } => {
            let mut spec = RunSpec::load(&config).stage("simulate")?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            simulate(&spec, run_index, &out).map(drop).stage("simulate")
        }
        Command::Prepare { run, out, config } => {
            let pairs = match config {
                Some(p) => RunSpec::load(&p).stage("prepare")?.pairs,
                None => PairOptions::default(),
            };
            prepare_dir(&run, &out, pairs).map(drop).stage("prepare")
        }
        Command::Train { data, model, out, config, run_index, overrides } => {
            let (model_cfg, train_cfg, root) = match config {
                Some(p) => {
                    let spec = RunSpec::load(&p).stage("train")?;
                    (spec.model.clone(), spec.train.clone(), spec.seed)
                }
                None => (ModelConfig::default(), TrainConfig { verbose: true, ..TrainConfig::default() }, 0),
            };
            let root = overrides.seed.unwrap_or(root);
            let train_cfg = overrides.apply(train_cfg);
            train_cfg.validate().stage("train")?;
            let model_cfg = ModelConfig { variant: model, ..model_cfg };
            let data = PreparedData::read_dir(&data).stage("train: reading data")?;
            let seeds = run_seeds(root, run_index);
            let model = Model::<f32>::new(model_cfg, seeds.init).stage("train")?;
            let cfg = TrainConfig { seed: seeds.train, ..train_cfg };
            let outcome = train(model, &data, &cfg, Some(&out)).stage("train")?;
            if let Some(b) = outcome.history.best() {
                println!("best epoch {} written to {}", b.epoch, out.join("best.ckpt").display());
            }
            Ok(())
        }
        Command::Eval { data, ckpt, report, config, model } => {
            let expected = match (config, model) {
                (Some(p), Some(m)) => Some(RunSpec::load(&p).stage("eval")?.model_config(&m)),
                _ => None,
            };
            eval(&data, &ckpt, &report, expected.as_ref()).map(drop).stage("eval")
        }
        Command::PredictPol { run, ckpt, checkpoint_index, out, j_ref } => {
            predict_pol(&run, &ckpt, checkpoint_index, &out, j_ref).stage("predict-pol")
        }
        Command::Reproduce { config, out, overrides } => {
            let mut spec = RunSpec::load(&config).stage("reproduce")?;
            if let Some(o) = out {
                spec.out_dir = o;
            }
            if let Some(s) = overrides.seed {
                spec.seed = s;
            }
            spec.train = overrides.apply(spec.train);
            spec.validate().stage("reproduce")?;
            let started = Instant::now();
            let report = reproduce(&spec)?;
            println!("{}", report::summary_line(&report));
            println!("wrote {} in {:.1} s", spec.out_dir.join("report.md").display(), started.elapsed().as_secs_f64());
            Ok(())
        }
    }
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.samples_per_epoch {
            cfg.samples_per_epoch = Some(v);
        }
        if self.quiet {
            cfg.verbose = false;
        }
        cfg
    }
}

pub fn simulate(spec: &RunSpec, index: usize, out: &Path) -> Result<RunDataset, CliError> {
    let run = generate_run(&spec.run_config(index)?)?;
    run.write_dir(out)?;
    Ok(run)
}

pub fn prepare_dir(run_dir: &Path, out: &Path, pairs: PairOptions) -> Result<PreparedData, CliError> {
    let run = RunDataset::read_dir(run_dir).stage("reading run")?;
    let data = prepare(&run, &PairOptions { seed: pair_seed(run.config.seed), ..pairs })?;
    data.write_dir(out)?;
    Ok(data)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

pub fn eval(data: &Path, ckpt: &Path, out: &Path, expected: Option<&ModelConfig>) -> Result<EvalSummary, CliError> {
    let tm: TrainedModel<f32> = load_trained(ckpt, expected)?;
    let data = PreparedData::read_dir(data).stage("reading data")?;
    if tm.stats != data.stats {
        return Err(Error::Data(format!(
            "{} was trained with different normalization statistics than the prepared data",
            ckpt.display()
        ))
        .into());
    }
    let summary = EvalSummary {
        config_hash: tm.model.config().hash(),
        variant: tm.model.config().variant.clone(),
        epoch: tm.epoch,
        train: evaluate(&tm.model, &data.train_op_pol, &data.train_op_op, &data.stats).stage("train split")?,
        val: evaluate(&tm.model, &data.val_op_pol, &data.val_op_op, &data.stats).stage("validation split")?,
    };
    create_dir(out)?;
    write_json(&out.join("eval.json"), &summary)?;
    let md = report::eval_markdown(&summary);
    fs::write(out.join("eval.md"), &md).map_err(|e| Error::io(out.join("eval.md"), e))?;
    print!("{md}");
    Ok(summary)
}

pub fn predict_pol(run_dir: &Path, ckpt: &Path, index: usize, out: &Path, j_ref: f64) -> Result<(), CliError> {
    let run = RunDataset::read_dir(run_dir).stage("reading run")?;
    let cycle = *run.config.checkpoints.get(index).ok_or_else(|| {
        CliError::config(format!(
            "checkpoint index {index} out of range; the run has {} checkpoints",
            run.config.checkpoints.len()
        ))
    })?;
    let tm: TrainedModel<f32> = load_trained(ckpt, None)?;
    let vt = virtual_test(&tm.model, &run, cycle, &tm.stats)?;
    let err = curve_mse(&vt.predicted, &vt.measured, &tm.stats)?;
    create_dir(out)?;
    let pairs = [(vt.measured.clone(), vt.predicted.clone())];
    write_curves_csv(&out.join("curves.csv"), &pairs)?;
    plot_curves_svg(&out.join("curves.svg"), &pairs, &format!("cycle {cycle}"))?;

    let pol = &run.pol_tests.iter().find(|p| p.cycle_index == cycle).expect("virtual_test found it").series;
    let mut ts = String::from("t_s,current_A_cm2,v_pred_V,v_meas_V\n");
    for (k, v) in vt.predicted_voltage.iter().enumerate() {
        ts.push_str(&format!("{},{},{},{}\n", k as f64 / pol.sample_hz, pol.current[k], v, pol.voltage[k]));
    }
    fs::write(out.join("voltage.csv"), ts).map_err(|e| Error::io(out.join("voltage.csv"), e))?;

    let v_meas = vt.measured.voltage_at(j_ref)?;
    let v_pred = vt.predicted.voltage_at(j_ref)?;
    write_json(
        &out.join("prediction.json"),
        &serde_json::json!({
            "cycle_index": cycle,
            "measured": vt.measured,
            "predicted": vt.predicted,
            "error": err,
            "j_ref": j_ref,
            "v_measured_at_j_ref": v_meas,
            "v_predicted_at_j_ref": v_pred,
        }),
    )?;
    println!(
        "cycle {cycle}: mean |dV| {:.2} mV, max {:.2} mV; at {j_ref} A/cm2 measured {v_meas:.4} V, predicted {v_pred:.4} V",
        err.mean_abs_v * 1e3,
        err.max_abs_v * 1e3
    );
    Ok(())
}

/// Every run and variant, then `report.json` and `report.md` under the
/// output directory. Reruns overwrite with identical bytes.
pub fn reproduce(spec: &RunSpec) -> Result<Report, CliError> {
    spec.validate()?;
    create_dir(&spec.out_dir)?;
    let mut runs = Vec::new();
    for (i, entry) in spec.runs.iter().enumerate() {
        let name = &entry.name;
        let started = Instant::now();
        let run = generate_run(&spec.run_config(i)?).stage(format!("{name}: simulate"))?;
        let data = prepare(&run, &spec.pair_options(run.config.seed)).stage(format!("{name}: prepare"))?;
        println!(
            "[{name}] {} train / {} validation checkpoints; samples op-pol {}+{}, op-op {}+{}  ({:.1} s)",
            data.plan.train.len(),
            data.plan.val.len(),
            data.train_op_pol.len(),
            data.val_op_pol.len(),
            data.train_op_op.len(),
            data.val_op_op.len(),
            started.elapsed().as_secs_f64()
        );
        let mut results = Vec::new();
        for variant in VARIANTS {
            let stage = format!("{name}/{variant}");
            let dir = variant_dir(spec, name, variant);
            create_dir(&dir)?;
            let model = Model::<f32>::new(spec.model_config(variant), run_seeds(spec.seed, i).init).stage(&stage)?;
            let outcome = train(model, &data, &spec.train_config(i), Some(&dir)).stage(format!("{stage}: train"))?;
            let r = characterize_variant(&outcome.best, &run, &data, &dir).stage(format!("{stage}: characterize"))?;
            println!(
                "[{stage}] best epoch {}, val op-op {:.3e}, curve mse {:.3e}, mean |dV| {:.2} mV  ({:.1} s)",
                r.best_epoch,
                r.val.op_op.normalized,
                r.curve.mse_normalized,
                r.curve.mae_v * 1e3,
                started.elapsed().as_secs_f64()
            );
            results.push(r);
        }
        let patch = results.pop().expect("two variants");
        let vanilla = results.pop().expect("two variants");
        runs.push(RunResult {
            name: name.clone(),
            profile: run.config.profile,
            rates: run.config.rates,
            checkpoints: run.config.checkpoints.len(),
            validation_cycles: data.plan.val.clone(),
            vanilla,
            patch,
        });
    }
    let report = Report::new(spec.seed, runs);
    write_json(&spec.out_dir.join("report.json"), &report)?;
    let md_path = spec.out_dir.join("report.md");
    fs::write(&md_path, report::markdown(&report)).map_err(|e| Error::io(&md_path, e))?;
    Ok(report)
}

/// Errors, curves and degradation table of one trained model on the
/// validation checkpoints; curve files go to `dir`.
pub fn characterize_variant(
    tm: &TrainedModel<f32>,
    run: &RunDataset,
    data: &PreparedData,
    dir: &Path,
) -> Result<VariantResult, CliError> {
    let model = &tm.model;
    let mut pairs = Vec::new();
    let mut per_checkpoint = Vec::new();
    for &cycle in &data.plan.val {
        let vt = virtual_test(model, run, cycle, &data.stats)?;
        per_checkpoint.push(CheckpointError { cycle_index: cycle, error: curve_mse(&vt.predicted, &vt.measured, &data.stats)? });
        pairs.push((vt.measured, vt.predicted));
    }
    write_curves_csv(&dir.join("curves.csv"), &pairs)?;
    plot_curves_svg(&dir.join("curves.svg"), &pairs, &format!("{} model, validation checkpoints", model.config().variant))?;
    let swap = match (data.plan.val.first(), data.plan.val.last()) {
        (Some(&a), Some(&b)) if a < b => Some(latent_swap(model, run, a, b, &data.stats, DEFAULT_J_REF)?),
        _ => None,
    };
    Ok(VariantResult {
        variant: model.config().variant.clone(),
        config_hash: model.config().hash(),
        param_count: model.param_count(),
        best_epoch: tm.epoch,
        train: evaluate(model, &data.train_op_pol, &data.train_op_op, &data.stats)?,
        val: evaluate(model, &data.val_op_pol, &data.val_op_op, &data.stats)?,
        curve: CurveSummary::new(&pairs, per_checkpoint),
        degradation: degradation_report(&pairs, DEFAULT_J_REF)?,
        latent_swap: swap,
    })
}

/// Where `reproduce` writes the checkpoint, history and curves of one run
/// and variant.
pub fn variant_dir(spec: &RunSpec, run: &str, variant: &str) -> PathBuf {
    spec.out_dir.join(run).join(variant)
}
