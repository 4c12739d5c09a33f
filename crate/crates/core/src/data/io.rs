//! `LVOL` volume files.
//!
//! ```text
//! "LVOL"     magic, 4 bytes
//! version    u16 LE (currently 1)
//! shape      3 x u32 LE, [d, h, w]
//! spacing    3 x f32 LE, millimetres
//! voxels     d*h*w x f32 LE, depth-major
//! ```
//!
//! Voxels are stored as `f32`; volumes whose values are `f32`-representable
//! (all generated phantoms) round-trip exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const VOLUME_MAGIC: [u8; 4] = *b"LVOL";
pub const VOLUME_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12 + 12;

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(&VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in volume.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in volume.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &v in volume.voxels() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            what: "magic",
            needed: 4,
            available: bytes.len(),
        });
    }
    if bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: VOLUME_MAGIC.to_vec(),
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            what: "volume header",
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOLUME_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VOLUME_VERSION,
        });
    }
    let word = |i: usize| -> [u8; 4] { bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap() };
    let shape = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    if shape.contains(&0) {
        return Err(Error::CorruptHeader(format!("zero dimension in shape {shape:?}")));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::CorruptHeader(format!("invalid voxel spacing {spacing:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptHeader(format!("shape {shape:?} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count {
        return Err(Error::Truncated {
            what: "voxel payload",
            needed: count,
            available: payload.len(),
        });
    }
    if payload.len() > count {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after voxel payload",
            payload.len() - count
        )));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Volume::new(shape, voxels)?.with_spacing(spacing))
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    fs::write(path, encode_volume(volume)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}
