use rand::Rng;
use rand_distr::StandardNormal;

use super::{categorical, check_batch, check_temperature, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// `K`-component Gaussian mixture with diagonal covariances. Weights are a
/// softmax over free logits.
#[derive(Clone, Debug)]
pub struct DiagGmmPrior<T: Real> {
    logits: Tensor<T>,
    means: Tensor<T>,
    log_stds: Tensor<T>,
}

impl<T: Real> DiagGmmPrior<T> {
    /// Uniform weights, unit scales, means drawn from `N(0, spread²)`.
    pub fn new<R: Rng + ?Sized>(components: usize, dim: usize, spread: f64, rng: &mut R) -> Result<Self> {
        if components == 0 || dim == 0 {
            return Err(Error::config("model.prior", "K and D must be at least 1"));
        }
        let means = (0..components * dim)
            .map(|_| T::c(spread * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::from_params(
            Tensor::zeros(&[components]),
            Tensor::new(&[components, dim], means)?,
            Tensor::zeros(&[components, dim]),
        )
    }

    pub fn from_params(logits: Tensor<T>, means: Tensor<T>, log_stds: Tensor<T>) -> Result<Self> {
        if logits.rank() != 1
            || means.rank() != 2
            || means.shape()[0] != logits.shape()[0]
            || log_stds.shape() != means.shape()
        {
            return Err(Error::shape(format!(
                "mixture expects logits [K], means [K,D], log_stds [K,D]; got {:?}, {:?}, {:?}",
                logits.shape(),
                means.shape(),
                log_stds.shape()
            )));
        }
        Ok(DiagGmmPrior {
            logits: logits.with_grad(true),
            means: means.with_grad(true),
            log_stds: log_stds.with_grad(true),
        })
    }

    pub fn components(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn weights(&self) -> Vec<f64> {
        let l = self.logits.to_f64_vec();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn log_prob<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = check_batch(&z.shape(), self.dim())?;
        let (k, d) = (self.components(), self.dim());
        let log_std = tape.leaf(&self.log_stds).reshape(&[1, k, d])?.expand(&[n, k, d])?;
        let diff = z
            .reshape(&[n, 1, d])?
            .expand(&[n, k, d])?
            .sub(tape.leaf(&self.means).reshape(&[1, k, d])?.expand(&[n, k, d])?)?;
        let per_comp = diff
            .square()
            .scale(T::c(-0.5))
            .mul(log_std.scale(T::c(-2.0)).exp())?
            .sub(log_std)?
            .add_scalar(T::c(-HALF_LN_2PI))
            .sum(&[2])?
            .reshape(&[n, k])?;
        let logits = tape.leaf(&self.logits);
        let log_w = logits.sub(logits.logsumexp(&[0])?)?.reshape(&[1, k])?.expand(&[n, k])?;
        per_comp.add(log_w)?.logsumexp(&[1])?.reshape(&[n])
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, temperature: f64, rng: &mut R) -> Result<Tensor<T>> {
        check_temperature(temperature)?;
        let w = self.weights();
        let d = self.dim();
        let (mu, ls) = (self.means.to_f64_vec(), self.log_stds.to_f64_vec());
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = categorical(&w, rng);
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                out.push(T::c(mu[k * d + j] + temperature * ls[k * d + j].exp() * eps));
            }
        }
        Tensor::new(&[n, d], out)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.logits"), &self.logits),
            (format!("{prefix}.means"), &self.means),
            (format!("{prefix}.log_stds"), &self.log_stds),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.logits, &mut self.means, &mut self.log_stds]
    }
}
