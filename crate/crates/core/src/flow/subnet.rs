//! Scale/shift networks used inside affine couplings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubnetKind {
    Mlp,
    Conv,
}

/// Three dense layers: `D → width → width → 2D`, tanh between layers.
#[derive(Clone, Debug)]
pub struct Mlp<T: Real> {
    weights: [Tensor<T>; 3],
    biases: [Tensor<T>; 3],
}

/// Three same-padded 3×3 convolutions: `C → width → width → 2C`.
#[derive(Clone, Debug)]
pub struct ConvNet<T: Real> {
    kernels: [Tensor<T>; 3],
    biases: [Tensor<T>; 3],
}

#[derive(Clone, Debug)]
pub enum Subnet<T: Real> {
    Mlp(Mlp<T>),
    Conv(ConvNet<T>),
}

fn xavier<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| T::c(rng.random_range(-a..a))).collect();
    Tensor::new(shape, v).expect("init shape").with_grad(true)
}

fn param_zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_grad(true)
}

impl<T: Real> Mlp<T> {
    /// Final layer starts at zero so the coupling begins as the identity.
    pub fn new<R: Rng + ?Sized>(dim: usize, width: usize, rng: &mut R) -> Self {
        Mlp {
            weights: [
                xavier(rng, &[dim, width], dim, width),
                xavier(rng, &[width, width], width, width),
                param_zeros(&[width, 2 * dim]),
            ],
            biases: [param_zeros(&[width]), param_zeros(&[width]), param_zeros(&[2 * dim])],
        }
    }

    /// Builds an MLP from explicit layer tensors (`[in,out]` weights).
    pub fn from_layers(weights: [Tensor<T>; 3], biases: [Tensor<T>; 3]) -> Result<Self> {
        for i in 0..3 {
            let w = weights[i].shape();
            if w.len() != 2 || biases[i].shape() != [w[1]] {
                return Err(Error::shape(format!(
                    "layer {i}: weight {w:?} incompatible with bias {:?}",
                    biases[i].shape()
                )));
            }
        }
        if weights[0].shape()[1] != weights[1].shape()[0]
            || weights[1].shape()[1] != weights[2].shape()[0]
            || weights[2].shape()[1] != 2 * weights[0].shape()[0]
        {
            return Err(Error::shape("MLP layers do not chain D → h → h → 2D"));
        }
        Ok(Mlp {
            weights: weights.map(|w| w.with_grad(true)),
            biases: biases.map(|b| b.with_grad(true)),
        })
    }
}

impl<T: Real> ConvNet<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        let k = 3;
        ConvNet {
            kernels: [
                xavier(rng, &[width, channels, k, k], channels * k * k, width * k * k),
                xavier(rng, &[width, width, k, k], width * k * k, width * k * k),
                param_zeros(&[2 * channels, width, k, k]),
            ],
            biases: [
                param_zeros(&[width]),
                param_zeros(&[width]),
                param_zeros(&[2 * channels]),
            ],
        }
    }
}

impl<T: Real> Subnet<T> {
    pub fn new<R: Rng + ?Sized>(kind: SubnetKind, shape: [usize; 3], width: usize, rng: &mut R) -> Self {
        match kind {
            SubnetKind::Mlp => Subnet::Mlp(Mlp::new(shape.iter().product(), width, rng)),
            SubnetKind::Conv => Subnet::Conv(ConvNet::new(shape[0], width, rng)),
        }
    }

    pub fn kind(&self) -> SubnetKind {
        match self {
            Subnet::Mlp(_) => SubnetKind::Mlp,
            Subnet::Conv(_) => SubnetKind::Conv,
        }
    }

    /// Maps the masked input `N×C×H×W` to raw `(s, t)` of the same shape.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!("subnet input must be N×C×H×W, got {shape:?}")));
        }
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        match self {
            Subnet::Mlp(net) => {
                let mut h = x.reshape(&[n, d])?;
                for i in 0..3 {
                    h = h
                        .matmul(tape.leaf(&net.weights[i]))?
                        .add_bias(tape.leaf(&net.biases[i]), 1)?;
                    if i < 2 {
                        h = h.tanh();
                    }
                }
                let s = h.slice(1, 0, d)?.reshape(&shape)?;
                let t = h.slice(1, d, 2 * d)?.reshape(&shape)?;
                Ok((s, t))
            }
            Subnet::Conv(net) => {
                let c = shape[1];
                let mut h = x;
                for i in 0..3 {
                    h = h
                        .conv2d(tape.leaf(&net.kernels[i]), Padding::Same)?
                        .add_bias(tape.leaf(&net.biases[i]), 1)?;
                    if i < 2 {
                        h = h.tanh();
                    }
                }
                Ok((h.slice(1, 0, c)?, h.slice(1, c, 2 * c)?))
            }
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let (ws, bs, wname) = match self {
            Subnet::Mlp(n) => (&n.weights, &n.biases, "weight"),
            Subnet::Conv(n) => (&n.kernels, &n.biases, "kernel"),
        };
        let mut out = Vec::with_capacity(6);
        for i in 0..3 {
            out.push((format!("{prefix}.{i}.{wname}"), &ws[i]));
            out.push((format!("{prefix}.{i}.bias"), &bs[i]));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let (ws, bs) = match self {
            Subnet::Mlp(n) => (&mut n.weights, &mut n.biases),
            Subnet::Conv(n) => (&mut n.kernels, &mut n.biases),
        };
        ws.iter_mut().zip(bs.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }
}
