//! HICUBE v1 container.
//!
//! ```text
//! 0..8      magic "HICUBE01"
//! 8..12     u32 LE header length L
//! 12..12+L  UTF-8 JSON header
//!           {"height":..,"width":..,"bands":..,"dtype":"f32","layout":"bsq","unit_scaled":..}
//! 12+L..    height*width*bands f32 LE, band-sequential, row-major within band
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::{HsiCube, PanImage};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HICUBE01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub layout: String,
    pub unit_scaled: bool,
}

pub fn encode_cube(cube: &HsiCube) -> Vec<u8> {
    let header = Header {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: "f32".into(),
        layout: "bsq".into(),
        unit_scaled: cube.unit_scaled,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * cube.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in cube.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let fmt = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 12 {
        return Err(fmt(bytes.len(), format!("file is {} bytes, shorter than the 12-byte preamble", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt(0, "bad magic, expected \"HICUBE01\"".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(fmt(
            12,
            format!("header length {header_len} exceeds file size {}", bytes.len()),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| fmt(12, format!("invalid header json: {e}")))?;
    if header.dtype != "f32" {
        return Err(fmt(12, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.layout != "bsq" {
        return Err(fmt(12, format!("unsupported layout {:?}", header.layout)));
    }
    if header.height == 0 || header.width == 0 || header.bands == 0 {
        return Err(fmt(12, "header dims must be positive".into()));
    }
    let count = header.height * header.width * header.bands;
    let expected = count * 4;
    let actual = bytes.len() - payload_start;
    if actual != expected {
        return Err(fmt(
            payload_start,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in bytes[payload_start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fmt(payload_start + 4 * i, format!("non-finite value {v}")));
        }
        values.push(v);
    }
    Ok(HsiCube::new(header.height, header.width, header.bands, values)?
        .with_unit_scaled(header.unit_scaled))
}

pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_cube(cube))?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    decode_cube(&fs::read(path)?)
}

/// PAN images are stored as one-band cubes.
pub fn write_pan(pan: &PanImage, path: impl AsRef<Path>) -> Result<()> {
    write_cube(&pan.to_cube().with_unit_scaled(true), path)
}

pub fn read_pan(path: impl AsRef<Path>) -> Result<PanImage> {
    PanImage::from_cube(&read_cube(path)?)
}
