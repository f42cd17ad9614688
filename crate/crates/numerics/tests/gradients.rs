//! Every differentiable primitive against central finite differences.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemata_numerics::{grad_check, layer_norm, softmax, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so that every output element carries a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> schemata_numerics::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn assert_passes(name: &str, report: schemata_numerics::GradCheckReport) {
    assert!(
        report.passed(),
        "{name}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [random(&[5, 7], &mut rng), random(&[7, 3], &mut rng)];
    let r = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum(y)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("matmul/sum", r);
    let r = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("matmul", r);
}

#[test]
fn matmul_t_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random(&[4, 6], &mut rng), random(&[3, 6], &mut rng)];
    let r = grad_check(
        |t, v| {
            let y = t.matmul_t(v[0], v[1])?;
            weighted_sum(t, y, 2)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("matmul_t", r);
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [random(&[3, 4], &mut rng)];
    let r = grad_check(
        |t, v| {
            let y = t.scale(v[0], 2.5)?;
            t.sum(y)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = [
        random(&[3, 4], &mut rng),
        random(&[3, 4], &mut rng),
        random(&[4], &mut rng),
    ];
    let r = grad_check(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 3)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("add", r);
    let r = grad_check(
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("mul", r);
    let r = grad_check(
        |t, v| {
            let y = t.add_bias(v[0], v[2])?;
            weighted_sum(t, y, 5)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("add_bias", r);
    let r = grad_check(
        |t, v| {
            let y = t.leaky_relu(v[0], 0.2)?;
            weighted_sum(t, y, 6)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("leaky_relu", r);
    let mask: Vec<f64> = (0..12)
        .map(|i| if i % 3 == 0 { 0.0 } else { 1.25 })
        .collect();
    let r = grad_check(
        |t, v| {
            let y = t.mul_const(v[0], mask.clone())?;
            weighted_sum(t, y, 7)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("mul_const", r);
}

#[test]
fn softmax_and_layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inputs = [
        random(&[4, 5], &mut rng),
        random(&[5], &mut rng),
        random(&[5], &mut rng),
    ];
    let r = grad_check(
        |t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 8)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("softmax", r);
    let r = grad_check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, 9)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("layer_norm", r);
}

#[test]
fn softmax_matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 6], &mut rng)];
    let r = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let p = t.softmax_rows(y)?;
            t.cross_entropy(p, &[1, 5, 0], &[1.0, 0.5, 2.0])
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("softmax∘matmul", r);
}

#[test]
fn graph_primitive_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = [random(&[4, 3], &mut rng), random(&[6, 1], &mut rng)];
    let idx: Rc<[usize]> = Rc::from(vec![0usize, 2, 2, 3, 1, 0]);
    let recv: Rc<[usize]> = Rc::from(vec![1usize, 1, 0, 3, 3, 3]);
    let seg: Rc<[usize]> = Rc::from(vec![0usize, 0, 1, 2, 2, 2]);
    let r = grad_check(
        |t, v| {
            let g = t.gather_rows(v[0], idx.clone())?;
            let a = t.segment_softmax(v[1], seg.clone(), 3)?;
            let s = t.scale_rows(g, a)?;
            let m = t.scatter_add_rows(s, recv.clone(), 4)?;
            weighted_sum(t, m, 10)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("gather/segment_softmax/scale_rows/scatter", r);
    let r = grad_check(
        |t, v| {
            let a = t.slice_rows(v[0], 1, 3)?;
            let b = t.slice_rows(v[0], 0, 1)?;
            let c = t.concat_rows(&[a, b, a])?;
            weighted_sum(t, c, 11)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("slice/concat", r);
    let fixed = Tensor::from_fn(&[1, 3], |i| i as f64);
    let r = grad_check(
        |t, v| {
            let y = t.replace_rows(v[0], vec![2], &fixed)?;
            weighted_sum(t, y, 12)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("replace_rows", r);
}

#[test]
fn corrupted_backward_fails_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let inputs = [random(&[2, 3], &mut rng)];
    let r = grad_check(
        |t, v| {
            let value = t.value(v[0]).map(|x| x * x);
            let y = t.custom(
                &[v[0]],
                value,
                Rc::new(|ins, _out, g| {
                    // wrong by a factor: d(x²)/dx is 2x
                    let d = ins[0]
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| 2.2 * x * g)
                        .collect();
                    vec![Tensor::new(ins[0].shape().to_vec(), d).unwrap()]
                }),
            )?;
            t.sum(y)
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap();
    assert!(!r.passed());
    assert!(r.max_rel_err > 0.05);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(vec![rows, cols], values[..rows * cols].to_vec()).unwrap();
        let s = softmax(&x, 1).unwrap();
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardises(values in prop::collection::vec(-10.0f64..10.0, 4..32)) {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assume!(var > 0.1);
        let x = Tensor::vector(values);
        let y = layer_norm(&x, &Tensor::full(&[n], 1.0), &Tensor::zeros(&[n])).unwrap();
        let m = y.sum() / n as f64;
        let v = y.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-5);
        prop_assert!((v - 1.0).abs() < 1e-3);
    }
}
