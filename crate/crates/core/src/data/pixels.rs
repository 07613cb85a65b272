//! Dequantization and the arctanh pixel transform.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const SPAN: f64 = 258.0;

/// Spatial normalization applied on load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ResizePolicy {
    #[default]
    None,
    /// Symmetric zero padding up to 32×32.
    Pad32,
    /// Bilinear resampling to 32×32, rounded back to integers.
    Resize32,
    /// Central `n×n` crop.
    Crop(usize),
}

impl FromStr for ResizePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ResizePolicy::None),
            "pad32" => Ok(ResizePolicy::Pad32),
            "resize32" => Ok(ResizePolicy::Resize32),
            _ => s
                .strip_prefix("crop")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n > 0)
                .map(ResizePolicy::Crop)
                .ok_or_else(|| {
                    Error::config(
                        "data.resize",
                        format!("expected none, pad32, resize32 or crop<N>, got `{s}`"),
                    )
                }),
        }
    }
}

impl TryFrom<String> for ResizePolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ResizePolicy> for String {
    fn from(p: ResizePolicy) -> String {
        match p {
            ResizePolicy::None => "none".into(),
            ResizePolicy::Pad32 => "pad32".into(),
            ResizePolicy::Resize32 => "resize32".into(),
            ResizePolicy::Crop(n) => format!("crop{n}"),
        }
    }
}

impl ResizePolicy {
    pub fn out_shape(self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        match self {
            ResizePolicy::None => Ok([c, h, w]),
            ResizePolicy::Pad32 if h <= 32 && w <= 32 => Ok([c, 32, 32]),
            ResizePolicy::Pad32 => Err(Error::config(
                "data.resize",
                format!("cannot pad {h}×{w} images to 32×32"),
            )),
            ResizePolicy::Resize32 => Ok([c, 32, 32]),
            ResizePolicy::Crop(n) if n <= h && n <= w => Ok([c, n, n]),
            ResizePolicy::Crop(n) => Err(Error::config(
                "data.resize",
                format!("cannot crop {n}×{n} from {h}×{w} images"),
            )),
        }
    }

    /// Resizes every `C×H×W` image in `pixels`.
    pub fn apply(self, shape: [usize; 3], pixels: &[u8]) -> Result<([usize; 3], Vec<u8>)> {
        let out = self.out_shape(shape)?;
        if out == shape {
            return Ok((shape, pixels.to_vec()));
        }
        let [_, h, w] = shape;
        let [_, oh, ow] = out;
        let mut res = Vec::with_capacity(pixels.len() / (h * w) * oh * ow);
        for plane in pixels.chunks(h * w) {
            match self {
                ResizePolicy::Pad32 | ResizePolicy::Crop(_) => {
                    // Signed offset of the output window inside the input.
                    let top = (h as isize - oh as isize) / 2;
                    let left = (w as isize - ow as isize) / 2;
                    for y in 0..oh as isize {
                        for x in 0..ow as isize {
                            let (sy, sx) = (y + top, x + left);
                            let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                            res.push(if inside {
                                plane[sy as usize * w + sx as usize]
                            } else {
                                0
                            });
                        }
                    }
                }
                ResizePolicy::Resize32 => {
                    for y in 0..oh {
                        let fy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
                        let y1 = (y0 + 1).min(h - 1);
                        for x in 0..ow {
                            let fx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                            let x1 = (x0 + 1).min(w - 1);
                            let p = |yy: usize, xx: usize| f64::from(plane[yy * w + xx]);
                            let v = (1.0 - ty) * ((1.0 - tx) * p(y0, x0) + tx * p(y0, x1))
                                + ty * ((1.0 - tx) * p(y1, x0) + tx * p(y1, x1));
                            res.push(v.round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
                ResizePolicy::None => unreachable!(),
            }
        }
        Ok((out, res))
    }
}

/// `pixel + U[0,1)` per element, as an `N×C×H×W` tensor.
pub fn dequantize<T: Real, R: Rng + ?Sized>(pixels: &[u8], shape: [usize; 3], rng: &mut R) -> Result<Tensor<T>> {
    let per: usize = shape.iter().product();
    if per == 0 || !pixels.len().is_multiple_of(per) || pixels.is_empty() {
        return Err(Error::shape(format!(
            "{} pixels do not form {shape:?} images",
            pixels.len()
        )));
    }
    let v = pixels
        .iter()
        .map(|&p| {
            let lo = f64::from(p);
            let x = T::c(lo + rng.random::<f64>());
            // Rounding to a narrow float type may land on the next bin.
            let hi = T::c(lo + 1.0);
            if x >= hi {
                hi - hi * T::epsilon()
            } else {
                x
            }
        })
        .collect();
    Tensor::new(&[pixels.len() / per, shape[0], shape[1], shape[2]], v)
}

/// Log-derivative of `x ↦ arctanh((2x − 256)/258)` at one element.
pub fn preprocess_logdet_element(x: f64) -> f64 {
    let v = (2.0 * x - 256.0) / SPAN;
    (2.0 / SPAN).ln() - (1.0 - v * v).ln()
}

/// Maps dequantized pixels to `u = arctanh((2x − 256)/258)`. Returns `u` and
/// the per-sample log-determinant `[N]`.
pub fn preprocess<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut u = Vec::with_capacity(x.numel());
    let mut logdet = Vec::with_capacity(n);
    for row in x.data().chunks(per) {
        let mut acc = 0.0f64;
        for &xv in row {
            let xv = xv.f64();
            let v = (2.0 * xv - 256.0) / SPAN;
            if !(v.abs() < 1.0) {
                return Err(Error::Domain(format!(
                    "pixel value {xv} outside the transform domain (-1, 257)"
                )));
            }
            u.push(T::c(v.atanh()));
            acc += (2.0 / SPAN).ln() - (1.0 - v * v).ln();
        }
        logdet.push(T::c(acc));
    }
    Ok((Tensor::new(x.shape(), u)?, Tensor::new(&[n], logdet)?))
}

/// Inverse transform back to integer pixels, saturating at 0 and 255.
pub fn postprocess<T: Real>(u: &Tensor<T>) -> Vec<u8> {
    u.data()
        .iter()
        .map(|&v| {
            let x = (SPAN * v.f64().tanh() + 256.0) / 2.0;
            x.clamp(0.0, 255.999).floor() as u8
        })
        .collect()
}
