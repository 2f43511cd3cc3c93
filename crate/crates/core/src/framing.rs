//! Versioned binary framing shared by model and classifier files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                               |
//! |-------|---------------------------------------|
//! | 8     | magic `SEGZSLCK`                      |
//! | 4     | format version (`u32`, currently 1)   |
//! | 4     | header length `n` (`u32`)             |
//! | n     | UTF-8 JSON header                     |
//! | rest  | payload: `f64` values, little-endian  |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"SEGZSLCK";
pub const VERSION: u32 = 1;

pub(crate) fn encode<H: Serialize>(header: &H, payload: &[f64]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a framed buffer into its parsed header and the raw payload bytes.
pub(crate) fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8]), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(CheckpointError::Truncated {
            expected: 16 + hlen,
            found: bytes.len(),
        });
    }
    let header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    Ok((header, &bytes[16 + hlen..]))
}

/// Reads exactly `count` `f64` values; a short payload is truncation, a long one
/// means the header's dimensions do not describe the data.
pub(crate) fn payload_f64(payload: &[u8], count: usize, offset: usize) -> Result<Vec<f64>, CheckpointError> {
    let need = count * 8;
    if payload.len() < need {
        return Err(CheckpointError::Truncated {
            expected: offset + need,
            found: offset + payload.len(),
        });
    }
    if payload.len() > need {
        return Err(CheckpointError::DimMismatch(format!(
            "header describes {count} values but payload holds {} bytes",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes via a sibling temporary file and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
