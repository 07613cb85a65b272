//! IDX container: big-endian magic, big-endian u32 dimensions, u8 payload.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::ImageDataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{what}: file shorter than the magic number")));
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let end = 4 + 4 * rank;
    if bytes.len() < end {
        return Err(Error::Format(format!("{what}: truncated dimension header")));
    }
    let dims: Vec<usize> = bytes[4..end]
        .chunks_exact(4)
        .map(|c| BigEndian::read_u32(c) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = bytes.len() - end;
    if payload != expected {
        return Err(Error::Format(format!(
            "{what}: payload has {payload} bytes, dimensions {dims:?} need {expected}"
        )));
    }
    Ok((dims, end))
}

/// Parses an in-memory IDX image file (`N×H×W`) and optional label file.
pub fn parse_idx(images: &[u8], labels: Option<&[u8]>, name: &str) -> Result<ImageDataset> {
    let (dims, start) = header(images, IMAGE_MAGIC, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("images: empty dimensions {dims:?}")));
    }
    let labels = match labels {
        Some(bytes) => {
            let (ldims, lstart) = header(bytes, LABEL_MAGIC, "labels")?;
            if ldims[0] != n {
                return Err(Error::Format(format!(
                    "label count {} does not match image count {n}",
                    ldims[0]
                )));
            }
            Some(bytes[lstart..].to_vec())
        }
        None => None,
    };
    ImageDataset::new(name, [1, h, w], images[start..].to_vec(), labels)
}

pub fn load_idx(images: &Path, labels: Option<&Path>, name: &str) -> Result<ImageDataset> {
    let img = fs::read(images)?;
    let lab = labels.map(fs::read).transpose()?;
    parse_idx(&img, lab.as_deref(), name)
}

/// Serializes images (single channel) and labels back to IDX bytes.
pub fn encode_idx(data: &ImageDataset) -> (Vec<u8>, Option<Vec<u8>>) {
    let [_, h, w] = data.shape();
    let mut img = Vec::with_capacity(16 + data.pixels().len());
    for v in [IMAGE_MAGIC, data.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(data.pixels());
    let lab = data.labels().map(|l| {
        let mut out = Vec::with_capacity(8 + l.len());
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(l.len() as u32).to_be_bytes());
        out.extend_from_slice(l);
        out
    });
    (img, lab)
}
