//! Embedding datasets: row metadata, file IO, length-based segmentation, and
//! the synthetic multilingual generator used for desk-scale experiments.

pub mod format;
pub mod segment;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DenseMatrix, NumericsError, SeededRng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic bytes (not an embedding file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("manifest has {manifest} rows but payload has {payload}")]
    RowCountMismatch { manifest: usize, payload: usize },
    #[error("dataset has no rows for any language")]
    EmptyLanguage,
    #[error("infeasible generator spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-row metadata carried in the sidecar manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: String,
    pub lang: String,
    /// Alignment-group id; rows sharing a group are translations of the
    /// same content.
    pub group: Option<String>,
}

/// Identity of the transformation that produced a set of vectors. Retrieval
/// refuses to mix differently-stamped queries and documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformStamp {
    pub method: String,
    pub checkpoint_sha256: Option<String>,
    pub atlas_sha256: Option<String>,
    pub strategy: Option<String>,
}

/// Sidecar manifest for an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rows: Vec<RowMeta>,
    pub transform: Option<TransformStamp>,
    /// Config that produced this file, embedded verbatim for replay.
    pub provenance: Option<serde_json::Value>,
}

/// An embedding matrix plus its manifest; row i of the matrix is described by
/// manifest row i.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: DenseMatrix,
    pub manifest: Manifest,
}

impl EmbeddingSet {
    pub fn new(matrix: DenseMatrix, manifest: Manifest) -> Result<Self, DataError> {
        if manifest.rows.len() != matrix.rows() {
            return Err(DataError::RowCountMismatch {
                manifest: manifest.rows.len(),
                payload: matrix.rows(),
            });
        }
        Ok(Self { matrix, manifest })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Rows per language, keyed by language code.
    pub fn language_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.manifest.rows {
            *counts.entry(r.lang.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// New set containing the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.matrix.row(i));
            rows.push(self.manifest.rows[i].clone());
        }
        let matrix = DenseMatrix::new(indices.len(), self.dim(), data).expect("subset shape");
        EmbeddingSet {
            matrix,
            manifest: Manifest {
                rows,
                transform: self.manifest.transform.clone(),
                provenance: self.manifest.provenance.clone(),
            },
        }
    }
}

/// Downsamples every language to the smallest per-language row count.
/// Which rows survive is decided by the seed; surviving rows keep their
/// original order. An already-balanced set passes through unchanged.
pub fn balance_by_language(set: &EmbeddingSet, seed: u64) -> Result<EmbeddingSet, DataError> {
    let counts = set.language_counts();
    let min = *counts.values().min().ok_or(DataError::EmptyLanguage)?;
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.manifest.rows.iter().enumerate() {
        by_lang.entry(&r.lang).or_default().push(i);
    }
    let mut rng = SeededRng::new(seed);
    let mut keep = Vec::with_capacity(min * counts.len());
    // Languages visited in sorted order so the rng stream is reproducible.
    for (_, rows) in by_lang {
        if rows.len() == min {
            keep.extend_from_slice(&rows);
        } else {
            let picked = rng.sample_indices(rows.len(), min);
            keep.extend(picked.into_iter().map(|p| rows[p]));
        }
    }
    keep.sort_unstable();
    Ok(set.subset(&keep))
}
