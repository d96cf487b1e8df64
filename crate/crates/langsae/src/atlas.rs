//! Per-language activation statistics of a trained model and the derived
//! frequent / language-unique / overlapping unit sets.
//!
//! Frequencies are stored as exact hit counts, and the threshold test
//! p >= tau is evaluated on the rational hits/total, so set membership at
//! tau = 0.999 does not flake on floating-point rounding with small probe
//! sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EmbeddingSet;
use crate::sae::{SaeError, SaeModel};

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("probe set is empty")]
    EmptyProbe,
    #[error("language code must be nonempty")]
    EmptyLanguageCode,
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("tau = {0} outside (0, 1]")]
    InvalidTau(f64),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Short language tag (e.g. ISO-639-1 code).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Result<Self, AtlasError> {
        let code = code.into();
        if code.is_empty() {
            return Err(AtlasError::EmptyLanguageCode);
        }
        Ok(Self(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for LanguageId {
    type Error = AtlasError;
    fn try_from(s: String) -> Result<Self, AtlasError> {
        Self::new(s)
    }
}

impl From<LanguageId> for String {
    fn from(l: LanguageId) -> String {
        l.0
    }
}

/// Which latent units to suppress for a language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    UniqueOnly,
    UniquePlusOverlapping,
}

impl MaskStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskStrategy::UniqueOnly => "unique-only",
            MaskStrategy::UniquePlusOverlapping => "unique-plus-overlapping",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unique-only" => Ok(MaskStrategy::UniqueOnly),
            "unique-plus-overlapping" => Ok(MaskStrategy::UniquePlusOverlapping),
            other => Err(format!(
                "unknown strategy {other:?}; expected unique-only or unique-plus-overlapping"
            )),
        }
    }
}

/// Exact comparison hits/total >= tau. Decomposes tau into its binary
/// mantissa and exponent and cross-multiplies in integers, so the result is
/// the true rational comparison for every representable tau.
pub fn rational_ge(hits: u64, total: u64, tau: f64) -> bool {
    assert!(total > 0, "total must be positive");
    assert!(tau > 0.0 && tau <= 1.0, "tau outside (0, 1]");
    if hits == 0 {
        return false;
    }
    if hits >= total {
        return true;
    }
    let bits = tau.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i64;
    let (mant, exp) = if exp_field == 0 {
        (bits & ((1u64 << 52) - 1), -1074i64)
    } else {
        ((bits & ((1u64 << 52) - 1)) | (1u64 << 52), exp_field - 1023 - 52)
    };
    // hits/total >= mant * 2^exp  <=>  hits * 2^-exp >= mant * total.
    debug_assert!(exp <= 0);
    let shift = (-exp) as u32;
    // hits >= 1, so once the shift exceeds the rhs bit width the lhs wins.
    if shift >= 120 {
        return true;
    }
    let lhs = (hits as u128) << shift;
    let rhs = mant as u128 * total as u128;
    lhs >= rhs
}

/// How often each latent unit fires per language, as exact counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationFrequencyTable {
    pub languages: Vec<LanguageId>,
    /// Latent width of the model the table was measured on.
    pub m: usize,
    /// hits[l][i] = probes of language l on which unit i was active.
    pub hits: Vec<Vec<u64>>,
    pub probe_counts: Vec<u64>,
}

impl ActivationFrequencyTable {
    pub fn language_index(&self, lang: &LanguageId) -> Result<usize, AtlasError> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| AtlasError::UnknownLanguage(lang.as_str().to_string()))
    }

    /// Frequency as a float, for reporting only; thresholding goes through
    /// [`rational_ge`].
    pub fn frequency(&self, unit: usize, lang_idx: usize) -> f64 {
        self.hits[lang_idx][unit] as f64 / self.probe_counts[lang_idx] as f64
    }

    pub fn is_frequent(&self, unit: usize, lang_idx: usize, tau: f64) -> bool {
        rational_ge(self.hits[lang_idx][unit], self.probe_counts[lang_idx], tau)
    }

    /// Languages whose probe count is too small for a stable estimate at
    /// `tau` (fewer than 10/(1-tau) probes).
    pub fn undersampled_languages(&self, tau: f64) -> Vec<(LanguageId, u64, f64)> {
        let required = 10.0 / (1.0 - tau);
        self.languages
            .iter()
            .zip(&self.probe_counts)
            .filter(|&(_, &count)| !required.is_finite() || (count as f64) < required)
            .map(|(l, &count)| (l.clone(), count, required))
            .collect()
    }
}

/// Counts, per language, the fraction of probe rows on which each unit is
/// active (appears in the sparse code with a positive value).
pub fn activation_frequencies(
    model: &SaeModel,
    probe: &EmbeddingSet,
) -> Result<ActivationFrequencyTable, AtlasError> {
    if probe.is_empty() {
        return Err(AtlasError::EmptyProbe);
    }
    let mut languages: Vec<LanguageId> = Vec::new();
    for row in &probe.manifest.rows {
        let lang = LanguageId::new(row.lang.clone())?;
        if !languages.contains(&lang) {
            languages.push(lang);
        }
    }
    languages.sort();
    let lang_idx: BTreeMap<&LanguageId, usize> =
        languages.iter().enumerate().map(|(i, l)| (l, i)).collect();

    let m = model.m();
    let mut hits = vec![vec![0u64; m]; languages.len()];
    let mut probe_counts = vec![0u64; languages.len()];
    let codes = model.encode_batch(&probe.matrix)?;
    for (row, code) in probe.manifest.rows.iter().zip(&codes) {
        let lang = LanguageId::new(row.lang.clone())?;
        let l = lang_idx[&lang];
        probe_counts[l] += 1;
        for i in code.indices() {
            hits[l][i] += 1;
        }
    }
    Ok(ActivationFrequencyTable { languages, m, hits, probe_counts })
}

/// Frequent/unique/overlapping unit sets at a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAtlas {
    pub tau: f64,
    pub m: usize,
    /// F_l: units with p >= tau for the language. Sorted ascending.
    pub frequent: BTreeMap<LanguageId, Vec<usize>>,
    /// U_l: frequent for this language and no other. Sorted ascending.
    pub unique: BTreeMap<LanguageId, Vec<usize>>,
    /// O: frequent for two or more languages. Sorted ascending.
    pub overlapping: Vec<usize>,
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
    #[serde(default)]
    pub probe_manifest_sha256: Option<String>,
}

/// Thresholds the table: F_l = {i : p_{i,l} >= tau}, U_l keeps the units of
/// F_l frequent for no other language, O collects units frequent for at
/// least two languages.
pub fn build_atlas(table: &ActivationFrequencyTable, tau: f64) -> Result<FeatureAtlas, AtlasError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(AtlasError::InvalidTau(tau));
    }
    let n_langs = table.languages.len();
    let mut frequent: Vec<Vec<usize>> = vec![Vec::new(); n_langs];
    let mut freq_count = vec![0u32; table.m];
    for l in 0..n_langs {
        for i in 0..table.m {
            if table.is_frequent(i, l, tau) {
                frequent[l].push(i);
                freq_count[i] += 1;
            }
        }
    }
    let overlapping: Vec<usize> =
        (0..table.m).filter(|&i| freq_count[i] >= 2).collect();
    let mut frequent_map = BTreeMap::new();
    let mut unique_map = BTreeMap::new();
    for (l, lang) in table.languages.iter().enumerate() {
        let unique: Vec<usize> =
            frequent[l].iter().copied().filter(|&i| freq_count[i] == 1).collect();
        frequent_map.insert(lang.clone(), frequent[l].clone());
        unique_map.insert(lang.clone(), unique);
    }
    Ok(FeatureAtlas {
        tau,
        m: table.m,
        frequent: frequent_map,
        unique: unique_map,
        overlapping,
        checkpoint_sha256: None,
        probe_manifest_sha256: None,
    })
}

impl FeatureAtlas {
    pub fn languages(&self) -> impl Iterator<Item = &LanguageId> {
        self.frequent.keys()
    }
}

/// Suppression set for a language: U_l, or U_l together with the global
/// overlapping set. Sorted ascending.
pub fn mask_set(
    atlas: &FeatureAtlas,
    lang: &LanguageId,
    strategy: MaskStrategy,
) -> Result<Vec<usize>, AtlasError> {
    let unique = atlas
        .unique
        .get(lang)
        .ok_or_else(|| AtlasError::UnknownLanguage(lang.as_str().to_string()))?;
    match strategy {
        MaskStrategy::UniqueOnly => Ok(unique.clone()),
        MaskStrategy::UniquePlusOverlapping => {
            let set: BTreeSet<usize> =
                unique.iter().chain(&atlas.overlapping).copied().collect();
            Ok(set.into_iter().collect())
        }
    }
}

/// Per-language set sizes of a built atlas.
#[derive(Debug, Clone, Serialize)]
pub struct AtlasSummary {
    pub tau: f64,
    pub per_language: BTreeMap<LanguageId, LanguageSetSizes>,
    pub overlapping: usize,
    pub mean_frequent_units: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LanguageSetSizes {
    pub frequent: usize,
    pub unique: usize,
}

pub fn atlas_summary(atlas: &FeatureAtlas) -> AtlasSummary {
    let mut per_language = BTreeMap::new();
    let mut total_frequent = 0usize;
    for (lang, f) in &atlas.frequent {
        let unique = atlas.unique.get(lang).map_or(0, Vec::len);
        total_frequent += f.len();
        per_language.insert(lang.clone(), LanguageSetSizes { frequent: f.len(), unique });
    }
    let n = atlas.frequent.len().max(1);
    AtlasSummary {
        tau: atlas.tau,
        per_language,
        overlapping: atlas.overlapping.len(),
        mean_frequent_units: total_frequent as f64 / n as f64,
    }
}

/// One row per tau: |F_l(tau)| for every language and the cross-language
/// mean.
#[derive(Debug, Clone, Serialize)]
pub struct FrequencyCurvePoint {
    pub tau: f64,
    pub per_language: BTreeMap<LanguageId, usize>,
    pub mean_frequent_units: f64,
}

pub fn frequency_curve(
    table: &ActivationFrequencyTable,
    tau_grid: &[f64],
) -> Result<Vec<FrequencyCurvePoint>, AtlasError> {
    let mut out = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let atlas = build_atlas(table, tau)?;
        let summary = atlas_summary(&atlas);
        out.push(FrequencyCurvePoint {
            tau,
            per_language: summary
                .per_language
                .iter()
                .map(|(l, s)| (l.clone(), s.frequent))
                .collect(),
            mean_frequent_units: summary.mean_frequent_units,
        });
    }
    Ok(out)
}

pub fn save_atlas(path: &Path, atlas: &FeatureAtlas) -> Result<(), AtlasError> {
    Ok(fs::write(path, serde_json::to_vec_pretty(atlas)?)?)
}

pub fn load_atlas(path: &Path) -> Result<FeatureAtlas, AtlasError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// On-disk form of a frequency table, carrying the identity of the inputs
/// it was measured from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
    #[serde(default)]
    pub probe_manifest_sha256: Option<String>,
    pub table: ActivationFrequencyTable,
}

pub fn save_table(path: &Path, file: &TableFile) -> Result<(), AtlasError> {
    Ok(fs::write(path, serde_json::to_vec_pretty(file)?)?)
}

pub fn load_table(path: &Path) -> Result<TableFile, AtlasError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
