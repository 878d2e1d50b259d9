use pemvc_core::gradcheck::{max_relative_error, primitive_report, random_tensor};
use pemvc_core::numerics::{Tape, Tensor};
use pemvc_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in [1, 2, 3] {
        for (name, err) in primitive_report(seed).unwrap() {
            assert!(err < 1e-4, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 7], 3.3));
    let y = tape.softmax(x, 1).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 7.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 5], -4.0));
    let g = tape.constant(Tensor::full(&[5], 1.0));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.layer_norm(x, g, b, 1, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_over_one_token_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(random_tensor(&[6, 4], &mut rng));
    let k = tape.constant(random_tensor(&[1, 4], &mut rng));
    let v = tape.constant(Tensor::new(&[1, 3], vec![0.25, -2.0, 9.5]).unwrap());
    let o = tape.scaled_dot_attention(q, k, v, 0.5).unwrap();
    for row in tape.value(o).data().chunks(3) {
        assert_eq!(row, &[0.25, -2.0, 9.5]);
    }
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0, -2.0]);
}

#[test]
fn mse_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.variable(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let l = tape.mse_loss(p, &[1.0, 1.0], None).unwrap();
    assert_eq!(tape.value(l).data()[0], 1.0);
    let same = tape.mse_loss(p, &[0.0, 0.0], None).unwrap();
    assert_eq!(tape.value(same).data()[0], 0.0);
    let none = tape.mse_loss(p, &[1.0, 1.0], Some(&[0.0, 0.0]));
    assert!(matches!(none, Err(Error::Data(_))));
}

#[test]
fn masked_mse_equals_mse_of_kept_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred = random_tensor(&[8], &mut rng);
    let target = random_tensor(&[8], &mut rng).into_data();
    let mask: Vec<f64> = (0..8).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::<f64>::new();
    let p = tape.variable(pred.clone());
    let masked = tape.mse_loss(p, &target, Some(&mask)).unwrap();
    let kept = tape.constant(Tensor::new(&[4], pred.data()[..4].to_vec()).unwrap());
    let plain = tape.mse_loss(kept, &target[..4], None).unwrap();
    let (a, b) = (tape.value(masked).data()[0], tape.value(plain).data()[0]);
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random_tensor(&[3, 4], &mut rng);
    let w0 = random_tensor(&[4, 2], &mut rng);
    let f = |tape: &mut Tape<f64>, x, w| {
        let y = tape.matmul(x, w).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        tape.sum(s)
    };
    let g = |tape: &mut Tape<f64>, x, _w| {
        let y = tape.gelu(x);
        tape.mean(y)
    };
    let grad_of = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(x0.clone());
        let w = tape.variable(w0.clone());
        let loss = match which {
            0 => f(&mut tape, x, w),
            1 => g(&mut tape, x, w),
            _ => {
                let a = f(&mut tape, x, w);
                let b = g(&mut tape, x, w);
                tape.add(a, b).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(x).unwrap().to_vec()
    };
    let (gf, gg, gsum) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gsum.len() {
        assert!((gsum[i] - gf[i] - gg[i]).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn chained_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        random_tensor(&[5, 4], &mut rng),
        random_tensor(&[4, 4], &mut rng),
        random_tensor(&[4], &mut rng),
    ];
    let err = max_relative_error(
        &|tp, v| {
            let h = tp.linear(v[0], v[1], Some(v[2]))?;
            let h = tp.gelu(h);
            let q = tp.slice(h, 1, 0, 2)?;
            let k = tp.slice(h, 1, 2, 4)?;
            let a = tp.scaled_dot_attention(q, k, h, 0.7)?;
            tp.add(a, v[0])
        },
        &inputs,
        5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_tensor(&[rows, cols], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.cast());
        let y = tape.softmax(xv, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(nq in 1usize..5, nk in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&[nq, 3], &mut rng);
        let k = random_tensor(&[nk, 3], &mut rng);
        let v = random_tensor(&[nk, 2], &mut rng);
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let o = tape.scaled_dot_attention(qv, kv, vv, 1.3).unwrap();
        for row in tape.value(o).data().chunks(2) {
            for (c, &x) in row.iter().enumerate() {
                let col: Vec<f64> = v.data().iter().skip(c).step_by(2).copied().collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
            }
        }
    }
}
