//! Datasets, pixel-space transforms, and on-disk formats.

mod checkpoint;
mod grid;
mod idx;
mod metrics;
mod moons;
mod pixels;
mod raw;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grid::{encode_image_grid, write_image_grid};
pub use idx::{encode_idx, load_idx, parse_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use metrics::{append_metrics_csv, write_metrics_csv, MetricsRecord};
pub use moons::{make_moons, PointDataset};
pub use pixels::{dequantize, postprocess, preprocess, preprocess_logdet_element, ResizePolicy};
pub use raw::{load_raw_grid, parse_raw_grid, Scaling};

use crate::error::{Error, Result};

/// Integer images `N×C×H×W` in `[0,255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    name: String,
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Option<Vec<u8>>,
    scaling: Option<Scaling>,
}

impl ImageDataset {
    pub fn new(name: &str, shape: [usize; 3], pixels: Vec<u8>, labels: Option<Vec<u8>>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.is_empty() || !pixels.len().is_multiple_of(per) {
            return Err(Error::Format(format!(
                "{} pixels do not form whole {shape:?} images",
                pixels.len()
            )));
        }
        let n = pixels.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Format(format!("{} labels for {n} images", l.len())));
            }
        }
        Ok(ImageDataset {
            name: name.to_string(),
            shape,
            pixels,
            labels,
            scaling: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn scaling(&self) -> Option<Scaling> {
        self.scaling
    }

    pub(crate) fn with_scaling(mut self, s: Scaling) -> Self {
        self.scaling = Some(s);
        self
    }

    /// Images `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Domain(format!("range {start}..{end} outside 0..{}", self.len())));
        }
        let d = self.dim();
        Ok(ImageDataset {
            name: self.name.clone(),
            shape: self.shape,
            pixels: self.pixels[start * d..end * d].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            scaling: self.scaling,
        })
    }

    /// Pixels of the listed images, concatenated.
    pub fn gather(&self, indices: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn resized(&self, policy: ResizePolicy) -> Result<Self> {
        let (shape, pixels) = policy.apply(self.shape, &self.pixels)?;
        Ok(ImageDataset {
            name: self.name.clone(),
            shape,
            pixels,
            labels: self.labels.clone(),
            scaling: self.scaling,
        })
    }
}
