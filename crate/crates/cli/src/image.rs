//! 8-bit grayscale PNG export of normalised maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use phyrm_core::{BinaryMask, Grid2D};

use crate::error::{CliError, Result};

/// Nearest 8-bit level of a value in [0, 1]; values outside are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_err(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |msg| CliError::Png {
        path: path.to_path_buf(),
        msg,
    }
}

pub fn write_gray(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let err = png_err(path);
    let mut w = enc.write_header().map_err(|e| err(e.to_string()))?;
    w.write_image_data(pixels).map_err(|e| err(e.to_string()))?;
    w.finish().map_err(|e| err(e.to_string()))
}

pub fn write_grid_png(path: &Path, grid: &Grid2D) -> Result<()> {
    let px: Vec<u8> = grid.values().iter().map(|&v| quantize(v)).collect();
    write_gray(path, grid.height(), grid.width(), &px)
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_gray(path, mask.height(), mask.width(), &px)
}

/// Pixels of an 8-bit grayscale PNG as (height, width, values in [0, 1]).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let err = png_err(path);
    let mut reader = png::Decoder::new(file).read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!(
            "expected 8-bit grayscale, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let values = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((info.height as usize, info.width as usize, values))
}
