use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn flip(self) -> Self {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }

    pub fn alternating(step: usize) -> Self {
        if step.is_multiple_of(2) {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// `mask[c,h,w] = 1` iff `(h + w) mod 2` matches the parity bit (even ⇔ 0).
pub fn make_checkerboard_mask<T: Real>(c: usize, h: usize, w: usize, parity: Parity) -> Tensor<T> {
    let bit = match parity {
        Parity::Even => 0,
        Parity::Odd => 1,
    };
    let mut v = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for y in 0..h {
            for x in 0..w {
                v.push(if (y + x) % 2 == bit { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::new(&[c, h, w], v).expect("mask shape")
}

/// First `⌈C/2⌉` channels are 1 for even parity, 0 for odd.
pub fn make_channel_mask<T: Real>(c: usize, h: usize, w: usize, parity: Parity) -> Result<Tensor<T>> {
    if c < 2 {
        return Err(Error::config(
            "mask",
            format!("channel masking needs at least 2 channels, got {c}"),
        ));
    }
    let half = c.div_ceil(2);
    let mut v = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let first = ch < half;
        let on = match parity {
            Parity::Even => first,
            Parity::Odd => !first,
        };
        v.extend(std::iter::repeat_n(if on { T::one() } else { T::zero() }, h * w));
    }
    Tensor::new(&[c, h, w], v)
}

/// Checkerboard where there is spatial extent to split, channel-wise for
/// 1×1 layouts with several channels.
pub fn default_mask<T: Real>(c: usize, h: usize, w: usize, parity: Parity) -> Result<Tensor<T>> {
    if h * w == 1 && c >= 2 {
        make_channel_mask(c, h, w, parity)
    } else {
        Ok(make_checkerboard_mask(c, h, w, parity))
    }
}
