//! 8-bit grayscale PNG encoding for stimulus and reconstruction grids.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::write_atomic;

fn to_bytes(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn encode_png(pixels: &[f64], side: usize) -> Result<Vec<u8>> {
    if pixels.len() != side * side {
        return Err(Error::dim("encode_png", &[pixels.len()], &[side, side]));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, side as u32, side as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format("png", e.to_string()))?;
        w.write_image_data(&to_bytes(pixels))
            .map_err(|e| Error::format("png", e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a grayscale PNG into `(pixels in [0,1], side)`.
pub fn decode_png(bytes: &[u8]) -> Result<(Vec<f64>, usize)> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png", "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("png", e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", "expected 8-bit grayscale"));
    }
    if info.width != info.height {
        return Err(Error::format("png", "expected a square image"));
    }
    buf.truncate(info.buffer_size());
    Ok((buf.iter().map(|&b| f64::from(b) / 255.0).collect(), info.width as usize))
}

pub fn write_png(path: &Path, pixels: &[f64], side: usize) -> Result<()> {
    write_atomic(path, &encode_png(pixels, side)?)
}
