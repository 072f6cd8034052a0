//! The `KSEG` single-sample file.
//!
//! ```text
//! "KSEG" | version: u32 | H: u32 | W: u32 | K: u32 | index: u64
//!        | image: f32[3*H*W] (CHW) | mask: u8[H*W]
//! ```
//!
//! Integers and floats are little-endian. The header is 28 bytes, so a file
//! holds `28 + 13*H*W` bytes.

use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"KSEG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

pub fn encoded_len(height: usize, width: usize) -> usize {
    HEADER_LEN + 13 * height * width
}

pub fn encode(sample: &Sample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::with_capacity(encoded_len(h, w));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [h, w, sample.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(sample.index as u64).to_le_bytes());
    for v in sample.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.mask);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Sample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let (h, w, k) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let index = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let expected = encoded_len(h, w);
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = h * w;
    let image: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + 12 * pixels]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = bytes[HEADER_LEN + 12 * pixels..].to_vec();
    if k < 2 || k > 255 {
        return Err(Error::Malformed(format!("class count {k} outside 2..=255")));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= k && m != crate::loss::IGNORE_INDEX) {
        return Err(Error::Malformed(format!("mask value {bad} for {k} classes")));
    }
    Ok(Sample {
        id: Sample::id_for(index),
        index,
        classes: k,
        image: Tensor::new(&[3, h, w], image)?,
        mask,
    })
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    std::fs::write(path, encode(sample)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
