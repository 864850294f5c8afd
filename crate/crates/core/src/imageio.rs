//! Minimal PNG helpers: 8-bit RGB and 16-bit grayscale.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(bytes).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

fn decode(path: &Path, color: png::ColorType, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::format(
            path,
            format!("expected {color:?}/{depth:?}, found {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// Writes interleaved RGB bytes.
pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    encode(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode(path, png::ColorType::Rgb, png::BitDepth::Eight)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h, bytes) = decode(path, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let values = bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, values))
}
