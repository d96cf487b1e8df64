//! Binary embedding file format.
//!
//! Layout: magic "LEMB", version u32 LE, rows u64 LE, dim u64 LE, then
//! rows*dim f32 values little-endian row-major. A JSON manifest is written
//! beside the binary at `<path>.manifest.json`. Values are stored as f32;
//! in-memory math stays f64.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{DataError, EmbeddingSet, Manifest};
use crate::numerics::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"LEMB";
pub const VERSION: u32 = 1;

/// Path of the JSON manifest that accompanies an embedding binary.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.matrix.rows() as u64).to_le_bytes())?;
    w.write_all(&(set.matrix.cols() as u64).to_le_bytes())?;
    for v in set.matrix.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let json = serde_json::to_vec_pretty(&set.manifest)?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, DataError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::CorruptFile("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| DataError::CorruptFile("missing version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| DataError::CorruptFile("missing row count".into()))?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)
        .map_err(|_| DataError::CorruptFile("missing dim".into()))?;
    let dim = u64::from_le_bytes(u64buf) as usize;

    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::CorruptFile("header overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(DataError::CorruptFile(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let matrix = DenseMatrix::new(rows, dim, data)
        .map_err(|e| DataError::CorruptFile(format!("bad values: {e}")))?;

    let manifest_bytes = fs::read(manifest_path(path))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    EmbeddingSet::new(matrix, manifest)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

pub fn sha256_hex_file(path: &Path) -> Result<String, DataError> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
