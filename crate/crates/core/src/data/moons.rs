use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Real-valued points `N×D` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDataset {
    pub name: String,
    pub points: Tensor<f64>,
    pub labels: Option<Vec<u8>>,
}

impl PointDataset {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }
}

/// Two interleaved half circles of unit radius. The upper arc is
/// `(cos t, sin t)`; the lower arc is `(1 − cos t, 1 − sin t − 0.5)`, for
/// `t` evenly spaced on `[0, π]`. Gaussian noise is added to both
/// coordinates.
pub fn make_moons(n: usize, noise_std: f64, seed: u64) -> Result<PointDataset> {
    if n < 2 {
        return Err(Error::Domain(format!("moons needs at least 2 points, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Domain(format!(
            "noise std must be non-negative, got {noise_std}"
        )));
    }
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = n.div_ceil(2);
    let lower = n - upper;
    let arc = |k: usize, count: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (count - 1) as f64
        }
    };
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..upper {
        let t = arc(k, upper);
        pts.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..lower {
        let t = arc(k, lower);
        pts.extend([1.0 - t.cos(), 1.0 - t.sin() - 0.5]);
        labels.push(1);
    }
    for p in &mut pts {
        *p += noise.sample(&mut rng);
    }
    Ok(PointDataset {
        name: "moons".into(),
        points: Tensor::new(&[n, 2], pts)?,
        labels: Some(labels),
    })
}
