use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{FlowOutput, FlowTransform};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Largest accepted 1-norm condition number of the mixing matrix.
pub const MAX_CONDITION: f64 = 1e6;

/// Invertible per-pixel channel mixing `y[:,h,w] = W·x[:,h,w]`.
#[derive(Clone, Debug)]
pub struct Mix1x1<T: Real> {
    weight: Tensor<T>,
}

fn to_matrix<T: Real>(w: &Tensor<T>) -> DMatrix<f64> {
    let c = w.shape()[0];
    DMatrix::from_row_iterator(c, c, w.data().iter().map(|v| v.f64()))
}

/// `W⁻¹` after checking `‖W‖₁·‖W⁻¹‖₁` against [`MAX_CONDITION`].
fn checked_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = w.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
    let norm1 = |m: &DMatrix<f64>| {
        m.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let cond = norm1(w) * norm1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular(cond));
    }
    Ok(inv)
}

impl<T: Real> Mix1x1<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape(format!("mixing matrix must be square, got {s:?}")));
        }
        checked_inverse(&to_matrix(&weight))?;
        Ok(Mix1x1 {
            weight: weight.with_grad(true),
        })
    }

    /// Random rotation: Q factor of a Gaussian matrix with `det = +1`.
    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let g = DMatrix::<f64>::from_fn(channels, channels, |_, _| rng.sample(StandardNormal));
        let mut q = g.qr().q();
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        let mut v = Vec::with_capacity(channels * channels);
        for i in 0..channels {
            for j in 0..channels {
                v.push(T::c(q[(i, j)]));
            }
        }
        Mix1x1 {
            weight: Tensor::new(&[channels, channels], v).expect("square").with_grad(true),
        }
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::shape(format!(
                "1x1 mixing over {} channels cannot take {shape:?}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Applies `rows · Mᵀ` at every pixel.
    fn apply<'t>(x: Var<'t, T>, m_t: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        x.transpose(&[0, 2, 3, 1])?
            .reshape(&[n * h * w, c])?
            .matmul(m_t)?
            .reshape(&[n, h, w, c])?
            .transpose(&[0, 3, 1, 2])
    }
}

impl<T: Real> FlowTransform<T> for Mix1x1<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<FlowOutput<'t, T>> {
        let s = x.shape();
        self.check_input(&s)?;
        checked_inverse(&to_matrix(&self.weight))?;
        let w = tape.leaf(&self.weight);
        let y = Self::apply(x, w.transpose(&[1, 0])?)?;
        let logdet = w.log_abs_det()?.scale(T::c((s[2] * s[3]) as f64)).expand(&[s[0]])?;
        Ok(FlowOutput::single(y, logdet))
    }

    fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&y.shape())?;
        let inv = checked_inverse(&to_matrix(&self.weight))?;
        let c = self.channels();
        let mut inv_t = Vec::with_capacity(c * c);
        for i in 0..c {
            for j in 0..c {
                inv_t.push(T::c(inv[(j, i)]));
            }
        }
        Self::apply(y, tape.constant(Tensor::new(&[c, c], inv_t)?))
    }

    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input[0] != self.channels() {
            return Err(Error::config(
                "model.layers",
                format!("1x1 mixing over {} channels given {input:?}", self.channels()),
            ));
        }
        Ok(input)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![(format!("{prefix}.weight"), &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight]
    }
}
