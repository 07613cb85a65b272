//! Randomized layers, models and priors built through the library, plus the
//! finite-difference checks run against them.

#![allow(dead_code)]

use fractalflow::flow::{
    AffineCoupling, FlowSequence, FlowTransform, FractalBlock, Layer, MaskKind, Mix1x1, Parity, Squeeze, SubnetKind,
    DEFAULT_CLAMP,
};
use fractalflow::prior::GridGmmLdaPrior;
use fractalflow::trainer::FlowModel;
use fractalflow::{Real, Tape, Tensor};
use rand::Rng;

use crate::common::{
    apply_transform, fd_jacobian, log_abs_det, model_config, randomize_params, randomized_model, rng, uniform_vec,
    BruteGridPrior,
};

pub fn coupling<T: Real>(
    shape: [usize; 3],
    kind: MaskKind,
    parity: Parity,
    subnet: SubnetKind,
    seed: u64,
) -> AffineCoupling<T> {
    let mut r = rng(seed);
    let mut layer = AffineCoupling::with_mask_kind(shape, kind, parity, subnet, 6, DEFAULT_CLAMP, &mut r).unwrap();
    randomize_params(layer.params_mut(), &mut r, 0.4);
    layer
}

pub fn fractal<T: Real>(shape: [usize; 3], schedule: &[usize], subnet: SubnetKind, seed: u64) -> FractalBlock<T> {
    let mut r = rng(seed);
    let mut block = FractalBlock::uniform(shape, schedule, 2, subnet, 6, DEFAULT_CLAMP, &mut r).unwrap();
    randomize_params(block.params_mut(), &mut r, 0.4);
    block
}

pub fn sequence<T: Real>(seed: u64) -> FlowSequence<T> {
    let mut r = rng(seed);
    let layers = vec![
        Layer::Coupling(
            AffineCoupling::with_mask_kind(
                [2, 4, 4],
                MaskKind::Checkerboard,
                Parity::Even,
                SubnetKind::Conv,
                6,
                2.0,
                &mut r,
            )
            .unwrap(),
        ),
        Layer::Mix(Mix1x1::random(2, &mut r)),
        Layer::Squeeze(Squeeze),
        Layer::Coupling(
            AffineCoupling::with_mask_kind(
                [8, 2, 2],
                MaskKind::Channel,
                Parity::Odd,
                SubnetKind::Mlp,
                6,
                2.0,
                &mut r,
            )
            .unwrap(),
        ),
        Layer::Fractal(FractalBlock::uniform([8, 2, 2], &[2, 1], 2, SubnetKind::Conv, 4, 2.0, &mut r).unwrap()),
    ];
    let mut seq = FlowSequence::new([2, 4, 4], layers, true).unwrap();
    randomize_params(seq.params_mut(), &mut r, 0.3);
    seq
}

/// Max abs error of `inverse(forward(x))` over `n` random inputs.
pub fn round_trip_error<T: Real, L: FlowTransform<T>>(layer: &L, shape: [usize; 3], n: usize, seed: u64) -> f64 {
    let [c, h, w] = shape;
    let x = Tensor::<T>::from_f64(&[n, c, h, w], &uniform_vec(&mut rng(seed), n * c * h * w, -2.0, 2.0)).unwrap();
    let tape = Tape::inference();
    let y = layer.forward(&tape, tape.constant(x.clone())).unwrap().y;
    layer.inverse(&tape, y).unwrap().value().max_abs_diff(&x)
}

pub fn sequence_round_trip<T: Real>(seq: &FlowSequence<T>, n: usize, seed: u64) -> f64 {
    let [c, h, w] = seq.input_shape();
    let x = Tensor::<T>::from_f64(&[n, c, h, w], &uniform_vec(&mut rng(seed), n * c * h * w, -2.0, 2.0)).unwrap();
    let tape = Tape::inference();
    let z = seq.forward(&tape, tape.constant(x.clone())).unwrap().z;
    seq.inverse(&tape, z).unwrap().value().max_abs_diff(&x)
}

pub fn fd_logdet_error<L: FlowTransform<f64>>(layer: &L, shape: [usize; 3], seed: u64) -> f64 {
    let d: usize = shape.iter().product();
    let x = uniform_vec(&mut rng(seed), d, -1.5, 1.5);
    let (_, analytic) = apply_transform(layer, shape, &x);
    let jac = fd_jacobian(|v| apply_transform(layer, shape, v).0, &x, 1e-5);
    (analytic - log_abs_det(jac)).abs()
}

pub fn level_state(block: &FractalBlock<f64>, x: &[f64], level: usize) -> Vec<f64> {
    let tape = Tape::inference();
    let out = block
        .forward(&tape, tape.constant(Tensor::from_f64(&[1, 1, 8, 8], x).unwrap()))
        .unwrap();
    out.states[level].value().to_f64_vec()
}

/// Perturbs every pixel of a `1×8×8` input in turn and checks the state after
/// `target` moves only inside the perturbed pixel's block at that level. All
/// other levels stay at their identity initialization. Returns the number of
/// violations.
pub fn block_leaks(schedule: &[usize], target: usize, subnet: SubnetKind, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut block = FractalBlock::<f64>::uniform([1, 8, 8], schedule, 2, subnet, 6, 2.0, &mut r).unwrap();
    let names: Vec<String> = block.named_params("f").into_iter().map(|(n, _)| n).collect();
    let tag = format!(".level{target}.");
    let chosen = block
        .params_mut()
        .into_iter()
        .zip(&names)
        .filter(|(_, n)| n.contains(&tag))
        .map(|(p, _)| p)
        .collect();
    randomize_params(chosen, &mut r, 0.5);

    let b = schedule[target];
    let x = uniform_vec(&mut r, 64, -1.0, 1.0);
    let base = level_state(&block, &x, target);
    let mut leaks = 0;
    for probe in 0..64 {
        let mut xp = x.clone();
        xp[probe] += 0.25;
        let moved = level_state(&block, &xp, target);
        let probe_block = (probe / 8 / b, probe % 8 / b);
        let mut inside = 0.0f64;
        for i in 0..64 {
            if (i / 8 / b, i % 8 / b) == probe_block {
                inside = inside.max((moved[i] - base[i]).abs());
            } else if moved[i] != base[i] {
                leaks += 1;
            }
        }
        if inside == 0.0 {
            leaks += 1;
        }
    }
    leaks
}

pub fn random_prior(q: usize, d: usize, m: usize, bound: f64, seed: u64) -> (GridGmmLdaPrior<f64>, BruteGridPrior) {
    let mut r = rng(seed);
    let la = uniform_vec(&mut r, q, -1.0, 1.0);
    let lb = uniform_vec(&mut r, q * d * m, -2.0, 2.0);
    let ls = uniform_vec(&mut r, q * d, -0.7, 0.4);
    let prior = GridGmmLdaPrior::from_params(
        Tensor::from_f64(&[q], &la).unwrap(),
        Tensor::from_f64(&[q, d, m], &lb).unwrap(),
        Tensor::from_f64(&[q, d], &ls).unwrap(),
        bound,
    )
    .unwrap();
    let brute = BruteGridPrior {
        alpha: la.iter().map(|v| v.exp()).collect(),
        beta: lb.iter().map(|v| v.exp()).collect(),
        sigma: ls.iter().map(|v| v.exp()).collect(),
        q,
        d,
        m,
        bound,
    };
    (prior, brute)
}

pub fn log_prob_rows(prior: &GridGmmLdaPrior<f64>, z: &[f64], d: usize) -> Vec<f64> {
    let tape = Tape::inference();
    let zt = tape.constant(Tensor::from_f64(&[z.len() / d, d], z).unwrap());
    prior.log_prob(&tape, zt).unwrap().value().to_f64_vec()
}

pub const LAMBDA: f64 = 0.05;
pub const STEP: f64 = 1e-5;
// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-4;

fn loss_value(model: &FlowModel<f64>, u: &Tensor<f64>) -> f64 {
    let tape = Tape::inference();
    let terms = model.total_loss(&tape, tape.constant(u.clone()), None, LAMBDA).unwrap();
    terms.loss.value().data()[0]
}

fn set_param(model: &mut FlowModel<f64>, which: usize, idx: usize, value: f64) {
    let mut params = model.params_mut();
    let mut v = params[which].to_f64_vec();
    v[idx] = value;
    params[which].set_values(v).unwrap();
}

/// Compares taped `total_loss` gradients with central differences on
/// `samples` randomly chosen scalar parameters. Returns the worst relative
/// error and where it occurred.
pub fn worst_gradient_error(cfg_text: &str, shape: [usize; 3], seed: u64, samples: usize) -> (f64, String) {
    let cfg = model_config(cfg_text);
    let mut model = randomized_model(&cfg, shape, seed, 0.3);
    let [c, h, w] = shape;
    let u = Tensor::from_f64(
        &[3, c, h, w],
        &uniform_vec(&mut rng(seed + 1), 3 * c * h * w, -1.5, 1.5),
    )
    .unwrap();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let terms = model.total_loss(&tape, tape.constant(u.clone()), None, LAMBDA).unwrap();
        let grads = tape.backward(terms.loss).unwrap();
        model
            .named_params()
            .iter()
            .map(|(_, p)| grads.get_or_zeros(p).to_f64_vec())
            .collect()
    };

    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut pick = rng(seed + 2);
    let (mut worst, mut at) = (0.0f64, String::new());
    for _ in 0..samples {
        let mut flat = pick.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let orig = model.named_params()[which].1.to_f64_vec()[flat];
        set_param(&mut model, which, flat, orig + STEP);
        let up = loss_value(&model, &u);
        set_param(&mut model, which, flat, orig - STEP);
        let down = loss_value(&model, &u);
        set_param(&mut model, which, flat, orig);
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[which][flat];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        if err >= worst {
            worst = err;
            at = format!(
                "{}[{flat}]: analytic {a} vs numeric {numeric}",
                model.named_params()[which].0
            );
        }
    }
    (worst, at)
}

/// Prior kinds × subnet kinds × with and without fractal blocks.
pub const GRADIENT_CASES: &[(&str, [usize; 3], &str)] = &[
    (
        "gaussian/mlp/stack",
        [1, 4, 4],
        "variant = \"realnvp\"\ncouplings = 3\nsubnet = \"mlp\"\nwidth = 8",
    ),
    (
        "diag-gmm/conv/stack+mix+squeeze",
        [1, 4, 4],
        "variant = \"realnvp\"\ncouplings = 3\nsubnet = \"conv\"\nwidth = 4\nmix1x1 = true\nsqueeze_after = 1\n[prior]\nkind = \"diag-gmm\"\ntopics = 3",
    ),
    (
        "grid/mlp/stack",
        [2, 1, 1],
        "variant = \"ldanf\"\ncouplings = 4\nsubnet = \"mlp\"\nwidth = 8\n[prior]\nkind = \"grid-gmm-lda\"\ntopics = 2\ncomponents = 5",
    ),
    (
        "grid/conv/fractal",
        [1, 4, 4],
        "variant = \"ldafnf\"\nsubnet = \"conv\"\nwidth = 4\nfractal_schedule = [4, 2]\nsteps_per_level = 2\n[prior]\nkind = \"grid-gmm-lda\"\ntopics = 3\ncomponents = 4",
    ),
    (
        "diag-gmm/mlp/fractal",
        [1, 4, 4],
        "variant = \"ldafnf\"\nsubnet = \"mlp\"\nwidth = 6\nfractal_schedule = [4, 2]\nsteps_per_level = 1\n[prior]\nkind = \"diag-gmm\"\ntopics = 2",
    ),
    (
        "gaussian/conv/fractal+mix",
        [2, 4, 4],
        "variant = \"ldafnf\"\nsubnet = \"conv\"\nwidth = 4\nfractal_schedule = [4, 2]\nsteps_per_level = 1\nmix1x1 = true",
    ),
];
