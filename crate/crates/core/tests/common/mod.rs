//! Independent oracles shared by the integration and acceptance tests. None of
//! these call into the library's numerics.

#![allow(dead_code, clippy::needless_range_loop)]

use fractalflow::config::ModelConfig;
use fractalflow::flow::{FlowSequence, FlowTransform};
use fractalflow::trainer::FlowModel;
use fractalflow::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian, `jac[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut x = x.to_vec();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let orig = x[j];
        x[j] = orig + h;
        let up = f(&x);
        x[j] = orig - h;
        let down = f(&x);
        x[j] = orig;
        cols.push(
            up.iter()
                .zip(&down)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let m = cols[0].len();
    (0..m).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        let piv = a[k][k];
        if piv == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = a[i][k] / piv;
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    acc
}

/// Same-padded cross-correlation, `x: [N,C,H,W]`, `k: [O,C,KH,KW]`.
pub fn conv2d_same(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [o, kc, kh, kw] = ks;
    assert_eq!(c, kc);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = y as isize + dy as isize - ph as isize;
                                let sx = xx as isize + dx as isize - pw as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += x[((b * c + ic) * h + sy as usize) * w + sx as usize]
                                    * k[((oc * c + ic) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

/// Grid-mixture topic density evaluated as the literal nested sum/product in
/// probability space: `Σ_q π_q Π_d Σ_m w_qdm N(z_d; μ_m, σ_qd²)` with
/// `π = α/Σα`, `w_qd = β_qd/Σβ_qd` and evenly spaced `μ` on `[-bound, bound]`.
pub struct BruteGridPrior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q: usize,
    pub d: usize,
    pub m: usize,
    pub bound: f64,
}

impl BruteGridPrior {
    pub fn mean(&self, k: usize) -> f64 {
        if self.m == 1 {
            0.0
        } else {
            -self.bound + 2.0 * self.bound * k as f64 / (self.m - 1) as f64
        }
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        let sa: f64 = self.alpha.iter().sum();
        let mut total = 0.0;
        for q in 0..self.q {
            let mut prod = self.alpha[q] / sa;
            for d in 0..self.d {
                let row = &self.beta[(q * self.d + d) * self.m..][..self.m];
                let sb: f64 = row.iter().sum();
                let s = self.sigma[q * self.d + d];
                let mut mix = 0.0;
                for (k, b) in row.iter().enumerate() {
                    let r = (z[d] - self.mean(k)) / s;
                    mix += b / sb * (-0.5 * r * r).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                prod *= mix;
            }
            total += prod;
        }
        total
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.density(z).ln()
    }
}

/// Composite Simpson rule on `[a,b]` with an even number of panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    assert!(panels.is_multiple_of(2));
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Adaptive Simpson quadrature: each panel is split until the Richardson
/// estimate meets its share of `tol`. Panels are first laid out uniformly so
/// narrow peaks are not skipped.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            rec(&f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 40)
        })
        .sum()
}

/// Simpson rule over a rectangle, `f` evaluated on the full tensor grid.
pub fn simpson_2d(f: impl Fn(f64, f64) -> f64, (a, b): (f64, f64), (c, d): (f64, f64), panels: usize) -> f64 {
    assert!(panels.is_multiple_of(2));
    let hx = (b - a) / panels as f64;
    let hy = (d - c) / panels as f64;
    let wt = |i: usize| {
        if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut s = 0.0;
    for i in 0..=panels {
        for j in 0..=panels {
            s += wt(i) * wt(j) * f(a + i as f64 * hx, c + j as f64 * hy);
        }
    }
    s * hx * hy / 9.0
}

/// Overwrites every parameter with `U(-scale, scale)` noise so flows are far
/// from the identity. Log-scale prior parameters get the same treatment.
pub fn randomize_params<T: fractalflow::Real>(params: Vec<&mut Tensor<T>>, rng: &mut impl Rng, scale: f64) {
    for p in params {
        let v = (0..p.numel()).map(|_| T::c(rng.random_range(-scale..scale))).collect();
        p.set_values(v).unwrap();
    }
}

pub fn randomized_model(cfg: &ModelConfig, shape: [usize; 3], seed: u64, scale: f64) -> FlowModel<f64> {
    let mut r = rng(seed);
    let mut model = FlowModel::<f64>::from_config(cfg, shape, &mut r).unwrap();
    randomize_params(model.params_mut(), &mut r, scale);
    model
}

pub fn model_config(toml_text: &str) -> ModelConfig {
    toml::from_str(toml_text).unwrap()
}

/// Applies a transform to a single flattened input of shape `[1,C,H,W]`.
pub fn apply_transform<L: FlowTransform<f64>>(layer: &L, shape: [usize; 3], x: &[f64]) -> (Vec<f64>, f64) {
    let tape = Tape::inference();
    let xv = tape.constant(Tensor::from_f64(&[1, shape[0], shape[1], shape[2]], x).unwrap());
    let out = layer.forward(&tape, xv).unwrap();
    (out.y.value().to_f64_vec(), out.logdet.value().to_f64_vec()[0])
}

pub fn apply_sequence(seq: &FlowSequence<f64>, x: &[f64]) -> (Vec<f64>, f64) {
    let [c, h, w] = seq.input_shape();
    let tape = Tape::inference();
    let xv = tape.constant(Tensor::from_f64(&[1, c, h, w], x).unwrap());
    let out = seq.forward(&tape, xv).unwrap();
    (out.z.value().to_f64_vec(), out.logdet.value().to_f64_vec()[0])
}

/// Best two-label agreement between predicted clusters and ground truth.
pub fn two_way_accuracy(pred: &[usize], truth: &[u8]) -> f64 {
    let same = pred.iter().zip(truth).filter(|(p, t)| **p == **t as usize).count();
    let n = pred.len() as f64;
    (same as f64 / n).max(1.0 - same as f64 / n)
}

pub fn std_dev(v: &[u8]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}
