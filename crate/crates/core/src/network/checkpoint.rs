//! Binary checkpoint: magic `IGSM`, `u16` version, the model config as
//! `key=value` text, then every stored tensor in name order, then a CRC32.
//! All integers and values are little-endian; values are `f32`.

use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::data::bytes::Reader;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IGSM";
pub const VERSION: u16 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let mut params: Vec<_> = model.store.iter().map(|(_, p)| p).collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a checkpoint. Structural problems are [`FormatError`]s; a
/// parameter set that does not match the embedded config is a
/// compatibility error.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Model<f32>, CheckpointError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    r.verify_crc()?;
    let cfg_len = r.u32()? as usize;
    let cfg_text = r.string(cfg_len)?;
    let config = ModelConfig::from_text(&cfg_text).map_err(|e| FormatError::Invalid {
        offset: 10,
        reason: format!("embedded config: {e}"),
    })?;
    let mut model = Model::<f32>::new(&config, 0).map_err(CheckpointError::Other)?;
    let count = r.u32()? as usize;
    let mut seen = 0;
    for _ in 0..count {
        let at = r.offset();
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let _trainable = r.u8()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(FormatError::Invalid {
                offset: at,
                reason: format!("tensor {name:?} has rank {rank}"),
            }
            .into());
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        let id = model.store.id(&name).ok_or_else(|| {
            Error::Compat(format!(
                "checkpoint tensor {name:?} is not part of the configured model"
            ))
        })?;
        let t = Tensor::new(&shape, data).map_err(|_| FormatError::Invalid {
            offset: at,
            reason: format!("tensor {name:?} has a zero extent"),
        })?;
        model.store.set_value(id, t).map_err(|_| {
            Error::Compat(format!(
                "checkpoint tensor {name:?} has shape {shape:?}, model expects {:?}",
                model.store.get(id).value.shape()
            ))
        })?;
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(Error::Compat(format!(
            "checkpoint holds {seen} tensors, model expects {}",
            model.store.len()
        ))
        .into());
    }
    r.expect_end()?;
    Ok(model)
}

/// Internal split so callers can attach the file path to format errors.
#[derive(Debug)]
pub enum CheckpointError {
    Format(FormatError),
    Other(Error),
}

impl From<FormatError> for CheckpointError {
    fn from(e: FormatError) -> Self {
        CheckpointError::Format(e)
    }
}

impl From<Error> for CheckpointError {
    fn from(e: Error) -> Self {
        CheckpointError::Other(e)
    }
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CheckpointError::Format(source) => Error::Format {
            path: path.to_path_buf(),
            source,
        },
        CheckpointError::Other(e) => e,
    })
}
