//! Central finite-difference oracle for the reverse-mode tape.
//!
//! Test-only: compiled under `cfg(test)` or the `gradcheck` feature. The
//! oracle evaluates the forward pass only and never reads tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Builds a graph from `inputs` (bound as variables) and returns its output.
pub type GraphFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Reduces `out` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct cotangent.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(&shape, weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn output_len(f: &GraphFn<'_>, inputs: &[Tensor<f64>]) -> Result<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).len())
}

fn eval(f: &GraphFn<'_>, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        weighted_sum(&mut tape, out, weights)?
    };
    Ok(tape.value(loss).data()[0])
}

/// Returns the largest norm-wise relative error
/// `max|analytic - numeric| / max(max|numeric|, 1e-8)` over all inputs.
pub fn max_relative_error(f: &GraphFn<'_>, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = output_len(f, inputs)?;
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if n_out == 1 {
        out
    } else {
        weighted_sum(&mut tape, out, &weights)?
    };
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[idx]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= FD_STEP;
            numeric[j] =
                (eval(f, &plus, &weights)? - eval(f, &minus, &weights)?) / (2.0 * FD_STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// One finite-difference check per tape primitive: `(name, max relative error)`.
pub fn primitive_report(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut rng);
    let a34 = t(&[3, 4]);
    let b34 = t(&[3, 4]);
    let b45 = t(&[4, 5]);
    let bias4 = t(&[4]);
    let b35 = t(&[3, 5]);
    let x234 = t(&[2, 3, 4]);
    let gamma3 = t(&[3]);
    let beta3 = t(&[3]);
    let gamma4 = t(&[4]);
    let beta4 = t(&[4]);
    let q = t(&[4, 3]);
    let k = t(&[5, 3]);
    let v = t(&[5, 2]);
    let c24 = t(&[2, 4]);
    let per_token = t(&[3, 4]);
    let target: Vec<f64> = t(&[3, 4]).into_data();
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let drop_mask_seed = seed ^ 0x5eed;

    let mut report = Vec::new();
    let mut check = |name: &'static str, f: &GraphFn<'_>, inputs: Vec<Tensor<f64>>| -> Result<()> {
        report.push((name, max_relative_error(f, &inputs, seed)?));
        Ok(())
    };

    check("add", &|tp, v| tp.add(v[0], v[1]), vec![a34.clone(), b34.clone()])?;
    check("add_bias", &|tp, v| tp.add_bias(v[0], v[1]), vec![a34.clone(), bias4.clone()])?;
    check("mul", &|tp, v| tp.mul(v[0], v[1]), vec![a34.clone(), b34.clone()])?;
    check("mul_self", &|tp, v| tp.mul(v[0], v[0]), vec![a34.clone()])?;
    check("scale", &|tp, v| Ok(tp.scale(v[0], -2.5)), vec![a34.clone()])?;
    check("matmul", &|tp, v| tp.matmul(v[0], v[1]), vec![a34.clone(), b45.clone()])?;
    check("transpose", &|tp, v| tp.transpose(v[0]), vec![a34.clone()])?;
    check("reshape", &|tp, v| tp.reshape(v[0], &[6, 2]), vec![a34.clone()])?;
    check(
        "concat_axis0",
        &|tp, v| tp.concat(&[v[0], v[1]], 0),
        vec![a34.clone(), c24.clone()],
    )?;
    check(
        "concat_axis1",
        &|tp, v| tp.concat(&[v[0], v[1]], 1),
        vec![a34.clone(), b35.clone()],
    )?;
    check("slice_axis1", &|tp, v| tp.slice(v[0], 1, 1, 3), vec![a34.clone()])?;
    check("slice_axis1_3d", &|tp, v| tp.slice(v[0], 1, 1, 3), vec![x234.clone()])?;
    check("sum", &|tp, v| Ok(tp.sum(v[0])), vec![a34.clone()])?;
    check("mean", &|tp, v| Ok(tp.mean(v[0])), vec![a34.clone()])?;
    check("softmax_last", &|tp, v| tp.softmax(v[0], 1), vec![a34.clone()])?;
    check("softmax_axis1_3d", &|tp, v| tp.softmax(v[0], 1), vec![x234.clone()])?;
    check(
        "layer_norm_last",
        &|tp, v| tp.layer_norm(v[0], v[1], v[2], 1, 1e-5),
        vec![a34.clone(), gamma4.clone(), beta4.clone()],
    )?;
    check(
        "layer_norm_axis1_3d",
        &|tp, v| tp.layer_norm(v[0], v[1], v[2], 1, 1e-5),
        vec![x234.clone(), gamma3.clone(), beta3.clone()],
    )?;
    check("gelu", &|tp, v| Ok(tp.gelu(v[0])), vec![a34.clone()])?;
    check(
        "linear",
        &|tp, v| tp.linear(v[0], v[1], Some(v[2])),
        vec![a34.clone(), b45.clone(), t_bias5()],
    )?;
    check(
        "scaled_dot_attention",
        &|tp, v| tp.scaled_dot_attention(v[0], v[1], v[2], 0.7),
        vec![q.clone(), k.clone(), v.clone()],
    )?;
    check(
        "self_attention_shared_input",
        &|tp, v| tp.scaled_dot_attention(v[0], v[0], v[0], 0.5),
        vec![k.clone()],
    )?;
    check(
        "dropout",
        &|tp, v| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_mask_seed);
            tp.dropout(v[0], 0.3, &mut r)
        },
        vec![a34.clone()],
    )?;
    check(
        "mse_loss",
        &|tp, v| tp.mse_loss(v[0], &target, None),
        vec![a34.clone()],
    )?;
    check(
        "mse_loss_masked",
        &|tp, v| tp.mse_loss(v[0], &target, Some(&mask)),
        vec![a34.clone()],
    )?;
    check(
        "overlap_average",
        &|tp, v| tp.overlap_average(v[0], &[0, 2, 4], 8),
        vec![per_token.clone()],
    )?;
    Ok(report)
}

fn t_bias5() -> Tensor<f64> {
    Tensor::new(&[5], vec![0.1, -0.2, 0.3, 0.05, -0.4]).expect("5 elements")
}

/// Relative gradient error of a whole model's masked sample loss, checked
/// against central differences over every parameter. Worst over parameter
/// tensors, normalized per tensor as in [`max_relative_error`] but with a
/// 1e-6 floor.
pub fn model_gradient_error(config: &ModelConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let l = model.seq_len();
    let d = config.channels;
    let x_enc = random_tensor(&[l * d], &mut rng).into_data();
    let x_dec = random_tensor(&[l * d], &mut rng).into_data();
    let y = random_tensor(&[l], &mut rng).into_data();
    // the last quarter is padding
    let mask: Vec<f64> = (0..l).map(|t| if t < l - l / 4 { 1.0 } else { 0.0 }).collect();

    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = m.sample_loss(&mut tape, &x_enc, &x_dec, &y, Some(&mask), None)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, &x_enc, &x_dec, &y, Some(&mask), None)?;
    tape.backward(loss)?;
    model.params.zero_grads();
    tape.accumulate_param_grads(&mut model.params);

    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let analytic = model.params.grad(i).to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = model.params.value(i).data()[j];
            model.params.value_mut(i).data_mut()[j] = orig + FD_STEP;
            let plus = loss_of(&model)?;
            model.params.value_mut(i).data_mut()[j] = orig - FD_STEP;
            let minus = loss_of(&model)?;
            model.params.value_mut(i).data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        // key biases shift every score in a row equally, which softmax
        // ignores, so their exact gradient is zero and only rounding remains
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-6);
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}
