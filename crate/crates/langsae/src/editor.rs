//! Latent-space editing: suppress a language's mask set in the sparse code
//! and decode back, plus the unmasked reconstruction control, the
//! inverse-mask export (language component only), and the
//! all-but-the-top principal-component baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{mask_set, AtlasError, FeatureAtlas, LanguageId, MaskStrategy};
use crate::data::{EmbeddingSet, Manifest, TransformStamp};
use crate::numerics::{
    dot, l2_normalize, principal_components, DenseMatrix, DenseVector, NumericsError,
};
use crate::sae::{SaeError, SaeModel, SparseCode};

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("transformed vector collapsed to zero{}", row_suffix(.row))]
    ZeroVector { row: Option<String> },
    #[error("covariance supports only {found} of {requested} requested components")]
    DegenerateCovariance { requested: usize, found: usize },
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn row_suffix(row: &Option<String>) -> String {
    match row {
        Some(id) => format!(" (row {id})"),
        None => String::new(),
    }
}

/// What to do when masking destroys the whole reconstruction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroVectorPolicy {
    Error,
    /// Return the unmasked reconstruction and flag the row.
    #[default]
    FallbackToReconstruction,
}

impl std::str::FromStr for ZeroVectorPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "error" => Ok(ZeroVectorPolicy::Error),
            "fallback-to-reconstruction" => Ok(ZeroVectorPolicy::FallbackToReconstruction),
            other => Err(format!(
                "unknown zero-vector policy {other:?}; expected error or fallback-to-reconstruction"
            )),
        }
    }
}

/// Everything needed to edit a batch: which units to suppress per language
/// and how to handle collapsed rows.
#[derive(Debug, Clone)]
pub struct EditPlan {
    pub atlas: FeatureAtlas,
    pub strategy: MaskStrategy,
    pub zero_vector_policy: ZeroVectorPolicy,
}

impl EditPlan {
    pub fn new(atlas: FeatureAtlas, strategy: MaskStrategy) -> Self {
        Self { atlas, strategy, zero_vector_policy: ZeroVectorPolicy::default() }
    }

    pub fn mask(&self, lang: &LanguageId) -> Result<Vec<usize>, AtlasError> {
        mask_set(&self.atlas, lang, self.strategy)
    }
}

/// Splits a code on a sorted mask: (entries outside the mask, entries inside).
/// The left part is what `edit` decodes, the right part what `inverse_mask`
/// decodes; together they hold exactly the original support.
pub fn split_code(code: &SparseCode, mask: &[usize]) -> (SparseCode, SparseCode) {
    let kept = code.filter_indices(|i| mask.binary_search(&i).is_err());
    let removed = code.filter_indices(|i| mask.binary_search(&i).is_ok());
    (kept, removed)
}

#[derive(Debug)]
pub struct EditedVector {
    pub vector: DenseVector,
    /// True when masking zeroed the reconstruction and the control vector
    /// was substituted.
    pub fell_back: bool,
}

fn normalize_or_zero(v: &DenseVector, row: Option<&str>) -> Result<DenseVector, EditorError> {
    match l2_normalize(v) {
        Ok(out) => Ok(out),
        Err(NumericsError::ZeroVector) => {
            Err(EditorError::ZeroVector { row: row.map(str::to_string) })
        }
        Err(other) => Err(other.into()),
    }
}

fn edit_with_mask(
    model: &SaeModel,
    plan: &EditPlan,
    mask: &[usize],
    e: &DenseVector,
    row: Option<&str>,
) -> Result<EditedVector, EditorError> {
    let code = model.encode(e)?;
    let (kept, _) = split_code(&code, mask);
    let decoded = model.decode(&kept)?;
    match normalize_or_zero(&decoded, row) {
        Ok(vector) => Ok(EditedVector { vector, fell_back: false }),
        Err(EditorError::ZeroVector { .. }) => match plan.zero_vector_policy {
            ZeroVectorPolicy::Error => {
                Err(EditorError::ZeroVector { row: row.map(str::to_string) })
            }
            ZeroVectorPolicy::FallbackToReconstruction => {
                let control = model.decode(&code)?;
                Ok(EditedVector { vector: normalize_or_zero(&control, row)?, fell_back: true })
            }
        },
        Err(other) => Err(other),
    }
}

/// Encodes, zeroes the language's mask set (no refilling from lower-ranked
/// activations), decodes and normalizes.
pub fn edit(
    model: &SaeModel,
    plan: &EditPlan,
    e: &DenseVector,
    lang: &LanguageId,
) -> Result<EditedVector, EditorError> {
    let mask = plan.mask(lang)?;
    edit_with_mask(model, plan, &mask, e, None)
}

/// Round trip through the model without any masking.
pub fn reconstruct_control(model: &SaeModel, e: &DenseVector) -> Result<DenseVector, EditorError> {
    let code = model.encode(e)?;
    let decoded = model.decode(&code)?;
    normalize_or_zero(&decoded, None)
}

/// Decodes only the masked units: the language component of the embedding.
/// A zero result is always an error here; exported language vectors must
/// not be silently replaced.
pub fn inverse_mask(
    model: &SaeModel,
    plan: &EditPlan,
    e: &DenseVector,
    lang: &LanguageId,
) -> Result<DenseVector, EditorError> {
    let mask = plan.mask(lang)?;
    let code = model.encode(e)?;
    let (_, removed) = split_code(&code, &mask);
    let decoded = model.decode(&removed)?;
    normalize_or_zero(&decoded, None)
}

/// Mean and leading principal components fitted on a reference matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbttParams {
    pub mean: Vec<f64>,
    /// One orthonormal component per row (d_pc x d).
    pub components: Vec<Vec<f64>>,
    pub d_pc: usize,
}

/// Fits the anisotropy-removal baseline: mean plus the top d_pc principal
/// components of x. d_pc = 0 gives a pure centering transform.
pub fn fit_abtt(x: &DenseMatrix, d_pc: usize) -> Result<AbttParams, EditorError> {
    if x.rows() <= d_pc {
        return Err(NumericsError::NotEnoughRows { need: d_pc + 1, got: x.rows() }.into());
    }
    let pca = principal_components(x, d_pc)?;
    if pca.degenerate || pca.components.rows() < d_pc {
        return Err(EditorError::DegenerateCovariance {
            requested: d_pc,
            found: pca.components.rows(),
        });
    }
    let components = (0..pca.components.rows()).map(|r| pca.components.row(r).to_vec()).collect();
    Ok(AbttParams { mean: pca.mean.into_vec(), components, d_pc })
}

/// Default component count for [`fit_abtt`]: max(1, d/100).
pub fn default_abtt_components(d: usize) -> usize {
    (d / 100).max(1)
}

/// Centers, projects out every fitted component, renormalizes.
pub fn apply_abtt(params: &AbttParams, e: &DenseVector) -> Result<DenseVector, EditorError> {
    apply_abtt_row(params, e.data(), None)
}

fn apply_abtt_row(
    params: &AbttParams,
    e: &[f64],
    row: Option<&str>,
) -> Result<DenseVector, EditorError> {
    if e.len() != params.mean.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "vector dim {} != transform dim {}",
            e.len(),
            params.mean.len()
        ))
        .into());
    }
    let mut v: Vec<f64> = e.iter().zip(&params.mean).map(|(a, m)| a - m).collect();
    for c in &params.components {
        let proj = dot(&v, c);
        for (vi, ci) in v.iter_mut().zip(c) {
            *vi -= proj * ci;
        }
    }
    normalize_or_zero(&DenseVector::new(v)?, row)
}

/// Wall-clock cost of a batch transform. Times include normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub method: String,
    pub total_s: f64,
    pub ms_per_sample: f64,
    pub samples_per_s: f64,
    pub n: usize,
}

impl TimingReport {
    fn from_elapsed(method: &str, total_s: f64, n: usize) -> Self {
        let samples = n.max(1) as f64;
        Self {
            method: method.to_string(),
            total_s,
            ms_per_sample: total_s * 1e3 / samples,
            samples_per_s: if total_s > 0.0 { samples / total_s } else { f64::INFINITY },
            n,
        }
    }
}

#[derive(Debug)]
pub struct EditBatch {
    pub set: EmbeddingSet,
    /// Per row: true when the zero-vector fallback fired.
    pub fell_back: Vec<bool>,
    pub timing: TimingReport,
}

fn assemble_batch(
    batch: &EmbeddingSet,
    stamp: TransformStamp,
    rows: Vec<(Vec<f64>, bool)>,
    total_s: f64,
) -> Result<EditBatch, EditorError> {
    let n = batch.len();
    let d = batch.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut fell_back = Vec::with_capacity(n);
    for (row, flag) in rows {
        data.extend_from_slice(&row);
        fell_back.push(flag);
    }
    let method = stamp.method.clone();
    let matrix = DenseMatrix::new(n, d, data)?;
    let manifest = Manifest {
        rows: batch.manifest.rows.clone(),
        transform: Some(stamp),
        provenance: batch.manifest.provenance.clone(),
    };
    let set = EmbeddingSet::new(matrix, manifest).expect("row counts match");
    Ok(EditBatch { set, fell_back, timing: TimingReport::from_elapsed(&method, total_s, n) })
}

fn run_rows<F>(batch: &EmbeddingSet, f: F) -> Result<Vec<(Vec<f64>, bool)>, EditorError>
where
    F: Fn(usize) -> Result<(Vec<f64>, bool), EditorError> + Sync + Send,
{
    (0..batch.len()).into_par_iter().map(f).collect()
}

/// Row-wise [`edit`] over a labeled embedding set. Output rows stay in input
/// order; the stamp is written into the output manifest so retrieval can
/// verify both sides of a comparison went through the same transform.
pub fn edit_batch(
    model: &SaeModel,
    plan: &EditPlan,
    batch: &EmbeddingSet,
    stamp: TransformStamp,
) -> Result<EditBatch, EditorError> {
    let mut masks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for row in &batch.manifest.rows {
        if !masks.contains_key(row.lang.as_str()) {
            let lang = LanguageId::new(row.lang.clone())?;
            masks.insert(row.lang.as_str(), plan.mask(&lang)?);
        }
    }
    let start = Instant::now();
    let rows = run_rows(batch, |r| {
        let meta = &batch.manifest.rows[r];
        let e = DenseVector::new(batch.matrix.row(r).to_vec())?;
        let out = edit_with_mask(model, plan, &masks[meta.lang.as_str()], &e, Some(&meta.id))?;
        Ok((out.vector.into_vec(), out.fell_back))
    })?;
    assemble_batch(batch, stamp, rows, start.elapsed().as_secs_f64())
}

/// Row-wise [`reconstruct_control`].
pub fn control_batch(
    model: &SaeModel,
    batch: &EmbeddingSet,
    stamp: TransformStamp,
) -> Result<EditBatch, EditorError> {
    let start = Instant::now();
    let rows = run_rows(batch, |r| {
        let meta = &batch.manifest.rows[r];
        let e = DenseVector::new(batch.matrix.row(r).to_vec())?;
        let code = model.encode(&e)?;
        let decoded = model.decode(&code)?;
        Ok((normalize_or_zero(&decoded, Some(&meta.id))?.into_vec(), false))
    })?;
    assemble_batch(batch, stamp, rows, start.elapsed().as_secs_f64())
}

/// Row-wise [`inverse_mask`]; any collapsed row aborts the export.
pub fn inverse_mask_batch(
    model: &SaeModel,
    plan: &EditPlan,
    batch: &EmbeddingSet,
    stamp: TransformStamp,
) -> Result<EditBatch, EditorError> {
    let mut masks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for row in &batch.manifest.rows {
        if !masks.contains_key(row.lang.as_str()) {
            let lang = LanguageId::new(row.lang.clone())?;
            masks.insert(row.lang.as_str(), plan.mask(&lang)?);
        }
    }
    let start = Instant::now();
    let rows = run_rows(batch, |r| {
        let meta = &batch.manifest.rows[r];
        let e = DenseVector::new(batch.matrix.row(r).to_vec())?;
        let code = model.encode(&e)?;
        let (_, removed) = split_code(&code, &masks[meta.lang.as_str()]);
        let decoded = model.decode(&removed)?;
        Ok((normalize_or_zero(&decoded, Some(&meta.id))?.into_vec(), false))
    })?;
    assemble_batch(batch, stamp, rows, start.elapsed().as_secs_f64())
}

/// Row-wise [`apply_abtt`].
pub fn abtt_batch(
    params: &AbttParams,
    batch: &EmbeddingSet,
    stamp: TransformStamp,
) -> Result<EditBatch, EditorError> {
    let start = Instant::now();
    let rows = run_rows(batch, |r| {
        let meta = &batch.manifest.rows[r];
        let out = apply_abtt_row(params, batch.matrix.row(r), Some(&meta.id))?;
        Ok((out.into_vec(), false))
    })?;
    assemble_batch(batch, stamp, rows, start.elapsed().as_secs_f64())
}
