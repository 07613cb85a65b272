use rand::Rng;
use rand_distr::StandardNormal;

use super::{categorical, check_batch, check_temperature, dirichlet_sample, WeightMode, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_GRID_BOUND: f64 = 3.0;
/// Latents used when seeding topics from data.
pub const SEED_SAMPLE_LIMIT: usize = 2000;
const KMEANS_ITERS: usize = 20;

/// Mixture over `Q` topics; within a topic every latent dimension is an
/// independent 1-D mixture over `M` fixed grid means. Topic and component
/// weights are Dirichlet-distributed and enter the density through their
/// expectations.
#[derive(Clone, Debug)]
pub struct GridGmmLdaPrior<T: Real> {
    topics: usize,
    dim: usize,
    components: usize,
    bound: f64,
    mu_grid: Vec<f64>,
    log_alpha: Tensor<T>,
    log_beta: Tensor<T>,
    log_sigma: Tensor<T>,
}

/// Evenly spaced means on `[-bound, bound]`; a single component sits at 0.
pub fn grid_means(components: usize, bound: f64) -> Vec<f64> {
    if components == 1 {
        return vec![0.0];
    }
    (0..components)
        .map(|m| -bound + 2.0 * bound * m as f64 / (components - 1) as f64)
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding. Returns a cluster per row.
fn kmeans<R: Rng + ?Sized>(pts: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let n = pts.len() / d;
    let row = |i: usize| &pts[i * d..(i + 1) * d];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centres: Vec<Vec<f64>> = vec![row(rng.random_range(0..n)).to_vec()];
    while centres.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| centres.iter().map(|c| dist(row(i), c)).fold(f64::INFINITY, f64::min))
            .collect();
        centres.push(row(categorical(&d2, rng)).to_vec());
    }
    let mut assign = vec![0; n];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = (0..k)
                .min_by(|&p, &q| dist(row(i), &centres[p]).total_cmp(&dist(row(i), &centres[q])))
                .unwrap_or(0);
        }
        for (q, c) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == q).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|&i| pts[i * d + j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Real> GridGmmLdaPrior<T> {
    /// All log-parameters start at 0: uniform weights and unit scales.
    pub fn new(topics: usize, dim: usize, components: usize, bound: f64) -> Result<Self> {
        if topics == 0 || dim == 0 || components == 0 {
            return Err(Error::config("model.prior", "Q, D and M must all be at least 1"));
        }
        Self::from_params(
            Tensor::zeros(&[topics]),
            Tensor::zeros(&[topics, dim, components]),
            Tensor::zeros(&[topics, dim]),
            bound,
        )
    }

    /// Builds from log-concentrations `[Q]`, `[Q,D,M]` and log-scales `[Q,D]`.
    pub fn from_params(log_alpha: Tensor<T>, log_beta: Tensor<T>, log_sigma: Tensor<T>, bound: f64) -> Result<Self> {
        if log_alpha.rank() != 1 || log_beta.rank() != 3 || log_sigma.rank() != 2 {
            return Err(Error::shape(
                "grid prior expects log_alpha [Q], log_beta [Q,D,M], log_sigma [Q,D]",
            ));
        }
        let q = log_alpha.shape()[0];
        let (d, m) = (log_beta.shape()[1], log_beta.shape()[2]);
        if log_beta.shape()[0] != q || log_sigma.shape() != [q, d] {
            return Err(Error::shape(format!(
                "inconsistent grid prior shapes {:?}, {:?}, {:?}",
                log_alpha.shape(),
                log_beta.shape(),
                log_sigma.shape()
            )));
        }
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::config("model.prior.bound", "grid bound must be non-negative"));
        }
        Ok(GridGmmLdaPrior {
            topics: q,
            dim: d,
            components: m,
            bound,
            mu_grid: grid_means(m, bound),
            log_alpha: log_alpha.with_grad(true),
            log_beta: log_beta.with_grad(true),
            log_sigma: log_sigma.with_grad(true),
        })
    }

    /// Data-driven start for the component weights. Topics that begin
    /// identical receive identical gradients and the mixture collapses onto
    /// one of them, so each topic is instead fitted to one cluster of a
    /// k-means split of `z` (`N×D`). A topic's `log_beta[q,d,·]` becomes the
    /// log of a kernel histogram of its cluster's coordinate `d` over the
    /// grid, with bandwidth half the grid spacing. Topic weights and scales
    /// are left untouched.
    pub fn seed_from_latents<R: Rng + ?Sized>(&mut self, z: &Tensor<T>, rng: &mut R) -> Result<()> {
        let n = check_batch(z.shape(), self.dim)?;
        let d = self.dim;
        let pts = z.to_f64_vec();
        if n == 0 || !pts.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("seeding needs finite latents".into()));
        }
        let assign = kmeans(&pts, d, self.topics, rng);
        let (q_n, m_n) = (self.topics, self.components);
        let spacing = if m_n > 1 {
            2.0 * self.bound / (m_n - 1) as f64
        } else {
            1.0
        };
        let h = 0.5 * spacing.max(f64::MIN_POSITIVE);
        let mut log_beta = Vec::with_capacity(q_n * d * m_n);
        for q in 0..q_n {
            for j in 0..d {
                let mut w = vec![1e-3; m_n];
                let mut total = 0.0;
                for i in (0..n).filter(|&i| assign[i] == q) {
                    for (m, mu) in self.mu_grid.iter().enumerate() {
                        let k = (-(pts[i * d + j] - mu).powi(2) / (2.0 * h * h)).exp();
                        w[m] += k;
                        total += k;
                    }
                }
                let norm = total + 1e-3 * m_n as f64;
                log_beta.extend(w.iter().map(|v| T::c((v / norm).ln())));
            }
        }
        self.log_beta.set_values(log_beta)
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn mu_grid(&self) -> &[f64] {
        &self.mu_grid
    }

    pub fn log_alpha(&self) -> &Tensor<T> {
        &self.log_alpha
    }

    pub fn log_beta(&self) -> &Tensor<T> {
        &self.log_beta
    }

    pub fn log_sigma(&self) -> &Tensor<T> {
        &self.log_sigma
    }

    /// Topic scales `σ_qd`, row-major `[Q,D]`.
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|v| v.f64().exp()).collect()
    }

    /// Dirichlet means: `E[π]` (length Q) and `E[w]` (row-major `[Q,D,M]`).
    pub fn expected_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let alpha = softmax(&self.log_alpha.to_f64_vec());
        let beta = self
            .log_beta
            .to_f64_vec()
            .chunks(self.components)
            .flat_map(softmax)
            .collect();
        (alpha, beta)
    }

    /// Per-topic joint log density `[N,Q]` (before mixing over topics).
    fn topic_log_joint<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = check_batch(&z.shape(), self.dim)?;
        let (q, d, m) = (self.topics, self.dim, self.components);
        let full = [n, q, d, m];

        let mu: Vec<T> = (0..n * q * d)
            .flat_map(|_| self.mu_grid.iter().map(|&v| T::c(v)))
            .collect();
        let diff = z
            .reshape(&[n, 1, d, 1])?
            .expand(&full)?
            .sub(tape.constant(Tensor::new(&full, mu)?))?;

        let log_sigma = tape
            .leaf(&self.log_sigma)
            .reshape(&[1, q, d, 1])?
            .expand(&[n, q, d, 1])?;
        let inv_var = log_sigma.scale(T::c(-2.0)).exp();
        let log_normal = diff
            .square()
            .scale(T::c(-0.5))
            .mul(inv_var)?
            .sub(log_sigma)?
            .add_scalar(T::c(-HALF_LN_2PI));

        let log_beta = tape.leaf(&self.log_beta);
        let log_w = log_beta
            .sub(log_beta.logsumexp(&[2])?)?
            .reshape(&[1, q, d, m])?
            .expand(&full)?;
        let per_dim = log_normal.add(log_w)?.logsumexp(&[3])?;
        let per_topic = per_dim.sum(&[2])?.reshape(&[n, q])?;

        let log_alpha = tape.leaf(&self.log_alpha);
        let log_pi = log_alpha
            .sub(log_alpha.logsumexp(&[0])?)?
            .reshape(&[1, q])?
            .expand(&[n, q])?;
        per_topic.add(log_pi)
    }

    /// Closed-form expected log density, `[N]`.
    pub fn log_prob<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        if !z.value().all_finite() {
            return Err(Error::NonFinite("prior input".into()));
        }
        let n = z.shape()[0];
        self.topic_log_joint(tape, z)?.logsumexp(&[1])?.reshape(&[n])
    }

    /// Posterior over topics, `[N,Q]`, rows summing to 1.
    pub fn topic_responsibilities(&self, z: &Tensor<T>) -> Result<Tensor<f64>> {
        let tape = Tape::inference();
        let joint = self.topic_log_joint(&tape, tape.constant(z.clone()))?;
        let norm = joint.logsumexp(&[1])?;
        let post = joint.sub(norm)?.exp().value();
        Ok(post.cast())
    }

    fn draw(
        &self,
        topic: Option<usize>,
        n: usize,
        temperature: f64,
        mode: WeightMode,
        fixed_assignment: Option<&[usize]>,
        rng: &mut (impl Rng + ?Sized),
    ) -> Result<Tensor<T>> {
        check_temperature(temperature)?;
        let (q, d, m) = (self.topics, self.dim, self.components);
        let (e_pi, e_w) = self.expected_weights();
        let alpha: Vec<f64> = self.log_alpha.data().iter().map(|v| v.f64().exp()).collect();
        let beta: Vec<f64> = self.log_beta.data().iter().map(|v| v.f64().exp()).collect();
        let sigma = self.sigma();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = match topic {
                Some(k) => k,
                None => match mode {
                    WeightMode::Expected => categorical(&e_pi, rng),
                    WeightMode::Resampled => categorical(&dirichlet_sample(&alpha, rng)?, rng),
                },
            };
            debug_assert!(k < q);
            for j in 0..d {
                let row = (k * d + j) * m;
                let comp = match fixed_assignment {
                    Some(a) => a[j],
                    None => match mode {
                        WeightMode::Expected => categorical(&e_w[row..row + m], rng),
                        WeightMode::Resampled => categorical(&dirichlet_sample(&beta[row..row + m], rng)?, rng),
                    },
                };
                let eps: f64 = rng.sample(StandardNormal);
                out.push(T::c(self.mu_grid[comp] + temperature * sigma[k * d + j] * eps));
            }
        }
        Tensor::new(&[n, d], out)
    }

    /// Draws `z: N×D` by sampling a topic, then one grid component and a
    /// Gaussian offset per dimension. Temperature scales only `σ`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        temperature: f64,
        mode: WeightMode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        self.draw(None, n, temperature, mode, None, rng)
    }

    /// Like [`sample`](Self::sample) with the topic fixed. A
    /// `fixed_assignment` pins each dimension's grid component.
    pub fn topic_conditional_sample<R: Rng + ?Sized>(
        &self,
        topic: usize,
        n: usize,
        temperature: f64,
        mode: WeightMode,
        fixed_assignment: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if topic >= self.topics {
            return Err(Error::Domain(format!(
                "topic {topic} out of range for Q={}",
                self.topics
            )));
        }
        if let Some(a) = fixed_assignment {
            if a.len() != self.dim {
                return Err(Error::shape(format!(
                    "assignment has {} entries, prior has {} dims",
                    a.len(),
                    self.dim
                )));
            }
            if let Some(&bad) = a.iter().find(|&&i| i >= self.components) {
                return Err(Error::Domain(format!(
                    "component {bad} out of range for M={}",
                    self.components
                )));
            }
        }
        self.draw(Some(topic), n, temperature, mode, fixed_assignment, rng)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.log_alpha"), &self.log_alpha),
            (format!("{prefix}.log_beta"), &self.log_beta),
            (format!("{prefix}.log_sigma"), &self.log_sigma),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.log_alpha, &mut self.log_beta, &mut self.log_sigma]
    }
}
