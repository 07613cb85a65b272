use super::{FlowOutput, FlowTransform};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Space-to-depth by a factor of 2. Output channel `4c + k` holds sub-pixel
/// `k` of input channel `c`, with `k` ordered TL, TR, BL, BR.
#[derive(Clone, Copy, Debug, Default)]
pub struct Squeeze;

fn squeeze_var<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("squeeze expects N×C×H×W, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("squeeze needs even H and W, got {h}×{w}")));
    }
    x.reshape(&[n, c, h / 2, 2, w / 2, 2])?
        .transpose(&[0, 1, 3, 5, 2, 4])?
        .reshape(&[n, 4 * c, h / 2, w / 2])
}

fn unsqueeze_var<'t, T: Real>(y: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = y.shape();
    if s.len() != 4 || !s[1].is_multiple_of(4) {
        return Err(Error::shape(format!("unsqueeze expects N×4C×H×W, got {s:?}")));
    }
    let (n, c4, h, w) = (s[0], s[1], s[2], s[3]);
    y.reshape(&[n, c4 / 4, 2, 2, h, w])?
        .transpose(&[0, 1, 4, 2, 5, 3])?
        .reshape(&[n, c4 / 4, 2 * h, 2 * w])
}

impl Squeeze {
    pub fn undo<'t, T: Real>(&self, y: Var<'t, T>) -> Result<Var<'t, T>> {
        unsqueeze_var(y)
    }
}

impl<T: Real> FlowTransform<T> for Squeeze {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<FlowOutput<'t, T>> {
        let y = squeeze_var(x)?;
        let n = y.shape()[0];
        Ok(FlowOutput::single(y, tape.constant(Tensor::zeros(&[n]))))
    }

    fn inverse<'t>(&self, _tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        unsqueeze_var(y)
    }

    fn out_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(
                "model.layers",
                format!("squeeze needs even spatial size, got {h}×{w}"),
            ));
        }
        Ok([4 * c, h / 2, w / 2])
    }

    fn named_params(&self, _prefix: &str) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}
