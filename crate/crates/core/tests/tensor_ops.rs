mod common;

use common::{conv2d_same, fd_gradient, rng, uniform_vec};
use fractalflow::{Padding, Tape, Tensor, Var};
use proptest::prelude::*;

type Build = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>;

/// Compares taped gradients of `Σ w ⊙ build(inputs)` against central
/// differences for every input.
fn check_grads(shapes: &[&[usize]], values: Vec<Vec<f64>>, build: &Build, tol: f64) {
    let weights = {
        let tape = Tape::<f64>::inference();
        let vars: Vec<_> = shapes
            .iter()
            .zip(&values)
            .map(|(s, v)| tape.constant(Tensor::from_f64(s, v).unwrap()))
            .collect();
        let out = build(&tape, &vars).value();
        uniform_vec(&mut rng(99), out.numel(), -1.0, 1.0)
    };
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tape = Tape::<f64>::inference();
        let vars: Vec<_> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.constant(Tensor::from_f64(s, v).unwrap()))
            .collect();
        build(&tape, &vars)
            .value()
            .to_f64_vec()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum()
    };

    let leaves: Vec<Tensor<f64>> = shapes
        .iter()
        .zip(&values)
        .map(|(s, v)| Tensor::from_f64(s, v).unwrap().with_grad(true))
        .collect();
    let tape = Tape::new();
    let vars: Vec<_> = leaves.iter().map(|l| tape.leaf(l)).collect();
    let out = build(&tape, &vars);
    let wv = tape.constant(Tensor::from_f64(&out.shape(), &weights).unwrap());
    let loss = out.mul(wv).unwrap().sum_all();
    let grads = tape.backward(loss).unwrap();

    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf).to_f64_vec();
        let numeric = fd_gradient(
            |x| {
                let mut vals = values.clone();
                vals[i] = x.to_vec();
                eval(&vals)
            },
            &values[i],
            1e-6,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = (a - n).abs() / (1.0 + n.abs());
            assert!(err < tol, "input {i}: analytic {a} vs numeric {n}");
        }
    }
}

fn rand_vals(seed: u64, shapes: &[&[usize]], lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    shapes
        .iter()
        .map(|s| uniform_vec(&mut r, s.iter().product(), lo, hi))
        .collect()
}

#[test]
fn elementwise_gradients() {
    let shapes: &[&[usize]] = &[&[2, 3], &[2, 3]];
    let vals = rand_vals(1, shapes, 0.2, 1.5);
    check_grads(shapes, vals.clone(), &|_, v| v[0].add(v[1]).unwrap(), 1e-7);
    check_grads(shapes, vals.clone(), &|_, v| v[0].sub(v[1]).unwrap(), 1e-7);
    check_grads(shapes, vals.clone(), &|_, v| v[0].mul(v[1]).unwrap(), 1e-7);
    check_grads(shapes, vals.clone(), &|_, v| v[0].exp().tanh().scale(3.0), 1e-7);
    check_grads(shapes, vals.clone(), &|_, v| v[0].log().unwrap().square(), 1e-7);
    check_grads(
        shapes,
        vals.clone(),
        &|_, v| v[0].softplus().neg().add_scalar(2.0),
        1e-7,
    );
}

#[test]
fn trailing_broadcast_gradients() {
    let shapes: &[&[usize]] = &[&[2, 3, 4], &[2, 1, 1]];
    let vals = rand_vals(2, shapes, -1.0, 1.0);
    check_grads(shapes, vals.clone(), &|_, v| v[0].mul(v[1]).unwrap(), 1e-7);
    check_grads(shapes, vals, &|_, v| v[1].add(v[0]).unwrap(), 1e-7);
}

#[test]
fn reduction_gradients() {
    let shapes: &[&[usize]] = &[&[2, 3, 4]];
    let vals = rand_vals(3, shapes, -2.0, 2.0);
    check_grads(shapes, vals.clone(), &|_, v| v[0].sum(&[1, 2]).unwrap(), 1e-7);
    check_grads(shapes, vals.clone(), &|_, v| v[0].logsumexp(&[2]).unwrap(), 1e-7);
    check_grads(shapes, vals.clone(), &|_, v| v[0].max(&[1]).unwrap(), 1e-7);
    check_grads(shapes, vals, &|_, v| v[0].mean_all(), 1e-7);
}

#[test]
fn layout_gradients() {
    let shapes: &[&[usize]] = &[&[2, 3, 4]];
    let vals = rand_vals(4, shapes, -1.0, 1.0);
    check_grads(
        shapes,
        vals.clone(),
        &|_, v| v[0].transpose(&[2, 0, 1]).unwrap().square(),
        1e-7,
    );
    check_grads(shapes, vals.clone(), &|_, v| v[0].slice(2, 1, 3).unwrap().exp(), 1e-7);
    check_grads(
        shapes,
        vals.clone(),
        &|_, v| v[0].reshape(&[6, 4]).unwrap().tanh(),
        1e-7,
    );
    check_grads(
        &[&[2, 1, 4]],
        rand_vals(5, &[&[2, 1, 4]], -1.0, 1.0),
        &|_, v| v[0].expand(&[2, 3, 4]).unwrap().square(),
        1e-7,
    );
    let mask = Tensor::from_f64(
        &[2, 3, 4],
        &(0..24).map(|i| (i % 3 == 0) as u8 as f64).collect::<Vec<_>>(),
    )
    .unwrap();
    check_grads(
        &[&[2, 3, 4], &[2, 3, 4]],
        rand_vals(6, &[&[2, 3, 4], &[2, 3, 4]], -1.0, 1.0),
        &move |_, v| Var::masked_merge(&mask, v[0].square(), v[1].exp()).unwrap(),
        1e-7,
    );
}

#[test]
fn linear_algebra_gradients() {
    let shapes: &[&[usize]] = &[&[3, 4], &[4, 2], &[2]];
    let vals = rand_vals(7, shapes, -1.0, 1.0);
    check_grads(
        shapes,
        vals,
        &|_, v| v[0].matmul(v[1]).unwrap().add_bias(v[2], 1).unwrap(),
        1e-7,
    );

    let a = vec![vec![2.0, 0.3, -0.1, 0.4, 1.5, 0.2, 0.1, -0.3, 1.2]];
    check_grads(&[&[3, 3]], a, &|_, v| v[0].log_abs_det().unwrap(), 1e-6);
}

#[test]
fn conv_gradients() {
    let shapes: &[&[usize]] = &[&[2, 2, 4, 3], &[3, 2, 3, 3], &[3]];
    let vals = rand_vals(8, shapes, -1.0, 1.0);
    check_grads(
        shapes,
        vals,
        &|_, v| v[0].conv2d(v[1], Padding::Same).unwrap().add_bias(v[2], 1).unwrap(),
        1e-7,
    );
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(10);
    for &(n, c, h, w, o) in &[(1, 1, 5, 5, 1), (2, 3, 4, 6, 5), (3, 2, 7, 3, 4)] {
        let x = uniform_vec(&mut r, n * c * h * w, -1.0, 1.0);
        let k = uniform_vec(&mut r, o * c * 9, -1.0, 1.0);
        let tape = Tape::<f64>::inference();
        let got = tape
            .constant(Tensor::from_f64(&[n, c, h, w], &x).unwrap())
            .conv2d(
                tape.constant(Tensor::from_f64(&[o, c, 3, 3], &k).unwrap()),
                Padding::Same,
            )
            .unwrap()
            .value()
            .to_f64_vec();
        let want = conv2d_same(&x, [n, c, h, w], &k, [o, c, 3, 3]);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn log_abs_det_matches_elimination() {
    let m = [4.0, 1.0, 0.5, -2.0, 3.0, 1.0, 0.0, 1.0, -5.0];
    let tape = Tape::<f64>::inference();
    let got = tape
        .constant(Tensor::from_f64(&[3, 3], &m).unwrap())
        .log_abs_det()
        .unwrap()
        .value()
        .to_f64_vec()[0];
    let rows = m.chunks(3).map(|r| r.to_vec()).collect();
    assert!((got - common::log_abs_det(rows)).abs() < 1e-12);
}

#[test]
fn backward_needs_scalar_root() {
    let tape = Tape::<f64>::new();
    let leaf = Tensor::zeros(&[2, 2]).with_grad(true);
    let v = tape.leaf(&leaf);
    assert!(tape.backward(v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logsumexp_is_shift_stable(vals in prop::collection::vec(-5.0f64..5.0, 6), shift in -500.0f64..500.0) {
        let tape = Tape::<f64>::inference();
        let base = tape.constant(Tensor::from_f64(&[2, 3], &vals).unwrap()).logsumexp(&[1]).unwrap().value();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let moved = tape.constant(Tensor::from_f64(&[2, 3], &shifted).unwrap()).logsumexp(&[1]).unwrap().value();
        for (a, b) in base.data().iter().zip(moved.data()) {
            prop_assert!((a + shift - b).abs() < 1e-9 * (1.0 + shift.abs()));
        }
    }

    #[test]
    fn transpose_round_trips(vals in prop::collection::vec(-1.0f64..1.0, 24)) {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 4], &vals).unwrap());
        let back = x.transpose(&[1, 2, 0]).unwrap().transpose(&[2, 0, 1]).unwrap();
        prop_assert_eq!(back.value().to_f64_vec(), vals);
    }

    #[test]
    fn matmul_matches_naive(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 12)) {
        let tape = Tape::<f64>::inference();
        let got = tape.constant(Tensor::from_f64(&[2, 3], &a).unwrap())
            .matmul(tape.constant(Tensor::from_f64(&[3, 4], &b).unwrap())).unwrap().value();
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                prop_assert!((got.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
