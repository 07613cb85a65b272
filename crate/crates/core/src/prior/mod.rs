//! Latent priors: standard Gaussian, diagonal Gaussian mixture, and the
//! grid-factorized mixture with Dirichlet topic weights.

mod diag;
mod grid_lda;

pub use diag::DiagGmmPrior;
pub use grid_lda::{grid_means, GridGmmLdaPrior, DEFAULT_GRID_BOUND, SEED_SAMPLE_LIMIT};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Source of mixture weights when sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Dirichlet means.
    #[default]
    Expected,
    /// Fresh Dirichlet draws per sample.
    Resampled,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(WeightMode::Expected),
            "resampled" => Ok(WeightMode::Resampled),
            other => Err(Error::config(
                "weight_mode",
                format!("expected `expected` or `resampled`, got `{other}`"),
            )),
        }
    }
}

/// Draws from `Dir(concentration)` by normalizing independent Gamma variates.
///
/// If every variate underflows (all concentrations tiny) the draw collapses
/// to a vertex chosen proportionally to the concentrations, which is the
/// distribution's limit.
pub fn dirichlet_sample<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if concentration.is_empty() {
        return Err(Error::Domain("empty Dirichlet concentration".into()));
    }
    if let Some(bad) = concentration.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Domain(format!(
            "Dirichlet concentration must be positive and finite, got {bad}"
        )));
    }
    let mut g: Vec<f64> = concentration
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("validated shape").sample(rng))
        .collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 && total.is_finite() {
        g.iter_mut().for_each(|v| *v /= total);
    } else {
        let k = categorical(concentration, rng);
        g.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = f64::from(u8::from(i == k)));
    }
    Ok(g)
}

/// Index drawn proportionally to non-negative `weights`.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    match WeightedIndex::new(weights) {
        Ok(d) => d.sample(rng),
        Err(_) => rng.random_range(0..weights.len()),
    }
}

/// `log N(x; 0, 1)` summed over the feature axis. Kept in this exact
/// operation order so the grid prior with one unit component reproduces it
/// bit for bit.
#[derive(Clone, Debug)]
pub struct StandardGaussianPrior {
    dim: usize,
}

impl StandardGaussianPrior {
    pub fn new(dim: usize) -> Self {
        StandardGaussianPrior { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_prob<'t, T: Real>(&self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = check_batch(&z.shape(), self.dim)?;
        z.square()
            .scale(T::c(-0.5))
            .add_scalar(T::c(-HALF_LN_2PI))
            .sum(&[1])?
            .reshape(&[n])
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, n: usize, temperature: f64, rng: &mut R) -> Result<Tensor<T>> {
        check_temperature(temperature)?;
        let v = (0..n * self.dim)
            .map(|_| T::c(temperature * rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        Tensor::new(&[n, self.dim], v)
    }
}

pub(crate) fn check_batch(shape: &[usize], dim: usize) -> Result<usize> {
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::shape(format!(
            "prior over {dim} dims expects N×{dim}, got {shape:?}"
        )));
    }
    Ok(shape[0])
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config("temperature", format!("must be positive, got {t}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Gaussian,
    DiagGmm,
    GridGmmLda,
}

#[derive(Clone, Debug)]
pub enum Prior<T: Real> {
    Gaussian(StandardGaussianPrior),
    DiagGmm(DiagGmmPrior<T>),
    GridGmmLda(GridGmmLdaPrior<T>),
}

impl<T: Real> Prior<T> {
    pub fn kind(&self) -> PriorKind {
        match self {
            Prior::Gaussian(_) => PriorKind::Gaussian,
            Prior::DiagGmm(_) => PriorKind::DiagGmm,
            Prior::GridGmmLda(_) => PriorKind::GridGmmLda,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(p) => p.dim(),
            Prior::DiagGmm(p) => p.dim(),
            Prior::GridGmmLda(p) => p.dim(),
        }
    }

    /// Per-sample log density `[N]` of latents `z: N×D`.
    pub fn log_prob<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Prior::Gaussian(p) => p.log_prob(z),
            Prior::DiagGmm(p) => p.log_prob(tape, z),
            Prior::GridGmmLda(p) => p.log_prob(tape, z),
        }
    }

    /// `weight_mode` only affects the grid prior.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        temperature: f64,
        weight_mode: WeightMode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        match self {
            Prior::Gaussian(p) => p.sample(n, temperature, rng),
            Prior::DiagGmm(p) => p.sample(n, temperature, rng),
            Prior::GridGmmLda(p) => p.sample(n, temperature, weight_mode, rng),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        match self {
            Prior::Gaussian(_) => Vec::new(),
            Prior::DiagGmm(p) => p.named_params(prefix),
            Prior::GridGmmLda(p) => p.named_params(prefix),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Prior::Gaussian(_) => Vec::new(),
            Prior::DiagGmm(p) => p.params_mut(),
            Prior::GridGmmLda(p) => p.params_mut(),
        }
    }
}
