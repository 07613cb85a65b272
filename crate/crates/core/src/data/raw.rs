use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::ImageDataset;
use crate::error::{Error, Result};

/// Affine map used to bring raw values into `[0,255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaling {
    pub min: f64,
    pub max: f64,
}

impl Scaling {
    pub fn to_pixel(&self, v: f64) -> u8 {
        let range = self.max - self.min;
        if range <= 0.0 {
            return 0;
        }
        ((v - self.min) / range * 255.0).round().clamp(0.0, 255.0) as u8
    }

    pub fn to_value(&self, p: f64) -> f64 {
        self.min + p / 255.0 * (self.max - self.min)
    }
}

/// Parses `count` little-endian f32 fields of shape `C×H×W`, min-max scales
/// them globally to `[0,255]` and rounds to integers.
pub fn parse_raw_grid(bytes: &[u8], shape: [usize; 3], count: usize, name: &str) -> Result<ImageDataset> {
    let per: usize = shape.iter().product();
    let expected = 4 * per * count;
    if count == 0 || per == 0 {
        return Err(Error::config("data.raw_shape", "shape and count must be non-zero"));
    }
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "raw grid holds {} bytes, {count}×{shape:?} f32 needs {expected}",
            bytes.len()
        )));
    }
    let mut vals = vec![0f32; per * count];
    LittleEndian::read_f32_into(bytes, &mut vals);
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("raw grid contains non-finite values".into()));
    }
    let (min, max) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(f64::from(v)), hi.max(f64::from(v)))
    });
    let scaling = Scaling { min, max };
    let pixels = vals.iter().map(|&v| scaling.to_pixel(f64::from(v))).collect();
    Ok(ImageDataset::new(name, shape, pixels, None)?.with_scaling(scaling))
}

pub fn load_raw_grid(path: &Path, shape: [usize; 3], count: usize) -> Result<ImageDataset> {
    parse_raw_grid(&fs::read(path)?, shape, count, "raw-grid")
}
