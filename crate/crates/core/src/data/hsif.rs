//! HSIF scene files.
//!
//! ```text
//! "HSIF"  u16 version=1  u32 H  u32 W  u32 V  u32 C
//! f32 × H·W·V   band-sequential: index v·H·W + r·W + c
//! u16 × H·W     labels, row-major, 0 = unlabeled
//! C × (u32 byte length, UTF-8 class name)
//! u32 CRC32 of every preceding byte
//! ```
//! All little-endian.

use std::path::Path;

use super::bytes::Reader;
use super::HsiCube;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"HSIF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4;

pub fn to_bytes(cube: &HsiCube) -> Vec<u8> {
    let (h, w, v) = (cube.height, cube.width, cube.bands);
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * (v * 4 + 2) + 64);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [h, w, v, cube.class_names.len()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for band in 0..v {
        for px in 0..h * w {
            out.extend_from_slice(&cube.values[px * v + band].to_le_bytes());
        }
    }
    for &l in &cube.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for name in &cube.class_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<HsiCube, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let v = r.u32()? as usize;
    let c = r.u32()? as usize;
    if h == 0 || w == 0 || v == 0 {
        return Err(FormatError::Invalid {
            offset: 6,
            reason: format!("zero extent in header {h}x{w}x{v}"),
        });
    }
    if c > u16::MAX as usize {
        return Err(FormatError::Invalid {
            offset: 18,
            reason: format!("class count {c} exceeds the label range"),
        });
    }
    let body = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(v * 4 + 2))
        .ok_or_else(|| FormatError::Invalid {
            offset: 6,
            reason: "header extents overflow".into(),
        })?;
    // Walk the name prefixes so a cut inside the names reports truncation
    // rather than a checksum mismatch. `need` is a lower bound until the
    // last prefix is read.
    let mut need = HEADER_LEN + body;
    for i in 0..c {
        let min_rest = 4 * (c - i) + 4;
        if bytes.len() < need + min_rest {
            return Err(FormatError::Truncated {
                expected: need + min_rest,
                actual: bytes.len(),
            });
        }
        let n = u32::from_le_bytes(bytes[need..need + 4].try_into().unwrap()) as usize;
        need = need.saturating_add(4).saturating_add(n);
    }
    need = need.saturating_add(4);
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }
    r.verify_crc()?;

    let band_seq = r.f32s(h * w * v)?;
    let mut values = vec![0f32; h * w * v];
    for band in 0..v {
        for px in 0..h * w {
            values[px * v + band] = band_seq[band * h * w + px];
        }
    }
    let label_at = r.offset();
    let labels = r.u16s(h * w)?;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let n = r.u32()? as usize;
        names.push(r.string(n)?);
    }
    r.expect_end()?;
    HsiCube::new(h, w, v, values, labels, names).map_err(|e| FormatError::Invalid {
        offset: label_at,
        reason: e.to_string(),
    })
}

pub fn write(cube: &HsiCube, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(cube)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HsiCube> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// CRC32 of a file's full contents, used to pin datasets in run manifests.
pub fn file_crc(path: &Path) -> Result<u32> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crc32fast::hash(&bytes))
}
