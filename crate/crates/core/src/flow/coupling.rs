use rand::Rng;

use super::mask::{default_mask, make_channel_mask, make_checkerboard_mask, Parity};
use super::subnet::{Subnet, SubnetKind};
use super::{FlowOutput, FlowTransform};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_CLAMP: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Checkerboard,
    Channel,
    /// Checkerboard, or channel-wise when the layout is 1×1.
    Auto,
}

/// Affine coupling: positions where `mask = 1` pass through and condition
/// `(s, t)`; the rest become `x·exp(ŝ) + t` with `ŝ = c·tanh(s/c)`.
#[derive(Clone, Debug)]
pub struct AffineCoupling<T: Real> {
    mask: Tensor<T>,
    subnet: Subnet<T>,
    clamp: T,
}

impl<T: Real> AffineCoupling<T> {
    pub fn new(mask: Tensor<T>, subnet: Subnet<T>, clamp: f64) -> Result<Self> {
        if mask.rank() != 3 {
            return Err(Error::shape(format!("mask must be C×H×W, got {:?}", mask.shape())));
        }
        if !(clamp > 0.0) {
            return Err(Error::config("clamp", "scale clamp must be positive"));
        }
        Ok(AffineCoupling {
            mask,
            subnet,
            clamp: T::c(clamp),
        })
    }

    pub fn with_mask_kind<R: Rng + ?Sized>(
        shape: [usize; 3],
        kind: MaskKind,
        parity: Parity,
        subnet: SubnetKind,
        width: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = shape;
        let mask = match kind {
            MaskKind::Checkerboard => make_checkerboard_mask(c, h, w, parity),
            MaskKind::Channel => make_channel_mask(c, h, w, parity)?,
            MaskKind::Auto => default_mask(c, h, w, parity)?,
        };
        Self::new(mask, Subnet::new(subnet, shape, width, rng), clamp)
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn subnet(&self) -> &Subnet<T> {
        &self.subnet
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != *self.mask.shape() {
            return Err(Error::shape(format!(
                "coupling expects N×{:?}, got {shape:?}",
                self.mask.shape()
            )));
        }
        Ok(())
    }

    /// Bounded scale `ŝ` and shift `t`, both zeroed on pass-through sites.
    fn scale_shift<'t>(
        &self,
        tape: &'t Tape<T>,
        conditioner: Var<'t, T>,
        batch_mask: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let xm = conditioner.mul(tape.constant(batch_mask.clone()))?;
        let (s, t) = self.subnet.forward(tape, xm)?;
        if !s.value().all_finite() || !t.value().all_finite() {
            return Err(Error::NonFinite("coupling scale/shift".into()));
        }
        let free = tape.constant(batch_mask.map(|m| T::one() - m));
        let s = s.scale(T::one() / self.clamp).tanh().scale(self.clamp).mul(free)?;
        let t = t.mul(free)?;
        Ok((s, t))
    }
}

impl<T: Real> FlowTransform<T> for AffineCoupling<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<FlowOutput<'t, T>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let n = shape[0];
        let batch_mask = self.mask.repeat_leading(n);
        let (s, t) = self.scale_shift(tape, x, &batch_mask)?;
        let moved = x.mul(s.exp())?.add(t)?;
        let y = Var::masked_merge(&batch_mask, x, moved)?;
        let logdet = s.sum(&[1, 2, 3])?.reshape(&[n])?;
        Ok(FlowOutput::single(y, logdet))
    }

    fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = y.shape();
        self.check_input(&shape)?;
        let batch_mask = self.mask.repeat_leading(shape[0]);
        let (s, t) = self.scale_shift(tape, y, &batch_mask)?;
        let moved = y.sub(t)?.mul(s.neg().exp())?;
        Var::masked_merge(&batch_mask, y, moved)
    }

    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input != self.shape() {
            return Err(Error::shape(format!(
                "coupling built for {:?} cannot take {input:?}",
                self.shape()
            )));
        }
        Ok(input)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.subnet.named_params(&format!("{prefix}.subnet"))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.subnet.params_mut()
    }
}
