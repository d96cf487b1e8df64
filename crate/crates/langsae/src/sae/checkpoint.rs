//! Checkpoint file: magic "LSAE", version u32 LE, length-prefixed JSON
//! header (d, m, k, config, stats), then f32 LE weight blocks in order
//! W_enc, b_enc, W_dec, b_dec, row-major.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SaeError, SaeModel, TrainConfig, TrainStats};
use crate::numerics::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"LSAE";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    d: usize,
    m: usize,
    k: usize,
    config: TrainConfig,
    stats: TrainStats,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SaeModel,
    pub config: TrainConfig,
    pub stats: TrainStats,
}

pub fn save_checkpoint(
    model: &SaeModel,
    config: &TrainConfig,
    stats: &TrainStats,
    path: &Path,
) -> Result<(), SaeError> {
    let header = Header {
        d: model.d(),
        m: model.m(),
        k: model.k(),
        config: config.clone(),
        stats: *stats,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut write_block = |values: &[f64]| -> Result<(), SaeError> {
        for v in values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    };
    write_block(model.w_enc().data())?;
    write_block(model.b_enc())?;
    write_block(model.w_dec().data())?;
    write_block(model.b_dec())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, SaeError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| SaeError::Corrupt("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(SaeError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| SaeError::Corrupt("missing version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(SaeError::UnsupportedVersion(version));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| SaeError::Corrupt("missing header length".into()))?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| SaeError::Corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| SaeError::Corrupt(format!("bad header json: {e}")))?;

    let (d, m) = (header.d, header.m);
    let mut read_block = |count: usize, what: &str| -> Result<Vec<f64>, SaeError> {
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| SaeError::Corrupt(format!("truncated {what} block")))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let w_enc = DenseMatrix::new(m, d, read_block(m * d, "W_enc")?)
        .map_err(|e| SaeError::Corrupt(format!("bad W_enc: {e}")))?;
    let b_enc = read_block(m, "b_enc")?;
    let w_dec = DenseMatrix::new(d, m, read_block(d * m, "W_dec")?)
        .map_err(|e| SaeError::Corrupt(format!("bad W_dec: {e}")))?;
    let b_dec = read_block(d, "b_dec")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(SaeError::Corrupt("trailing bytes after weight blocks".into()));
    }
    let model = SaeModel::new(d, m, header.k, w_enc, b_enc, w_dec, b_dec)?;
    Ok(Checkpoint { model, config: header.config, stats: header.stats })
}
