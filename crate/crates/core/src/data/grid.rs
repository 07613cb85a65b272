//! Binary PGM/PPM sample sheets.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const GUTTER: usize = 2;

/// Tiles `rows·cols` images (`C×H×W` pixels each, row-major) into one raster
/// separated by black gutters. One channel encodes as P5, three as P6.
pub fn encode_image_grid(pixels: &[u8], shape: [usize; 3], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let [c, h, w] = shape;
    let per = c * h * w;
    if c != 1 && c != 3 {
        return Err(Error::Domain(format!("image grids need 1 or 3 channels, got {c}")));
    }
    if rows == 0 || cols == 0 || per == 0 || pixels.len() < rows * cols * per {
        return Err(Error::Domain(format!(
            "{} images available, {rows}×{cols} grid requested",
            pixels.len() / per.max(1)
        )));
    }
    let gw = cols * w + (cols - 1) * GUTTER;
    let gh = rows * h + (rows - 1) * GUTTER;
    let mut raster = vec![0u8; gw * gh * c];
    for r in 0..rows {
        for k in 0..cols {
            let img = &pixels[(r * cols + k) * per..][..per];
            let (oy, ox) = (r * (h + GUTTER), k * (w + GUTTER));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        raster[((oy + y) * gw + ox + x) * c + ch] = img[(ch * h + y) * w + x];
                    }
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&raster);
    Ok(out)
}

pub fn write_image_grid(pixels: &[u8], shape: [usize; 3], rows: usize, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_image_grid(pixels, shape, rows, cols)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}
