//! Synthetic multilingual embedding generator.
//!
//! Stands in for a frozen multilingual encoder at desk scale. Each alignment
//! group g gets a semantic direction s_g, each language a direction u_l; a
//! document embedding for (g, l) is normalize(s_g + alpha*u_l + sigma*noise).
//! With alpha > 0 same-language vectors share the u_l component, so baseline
//! retrieval exhibits same-language crowding; alpha = 0 removes the language
//! signal entirely.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{DataError, EmbeddingSet, Manifest, RowMeta};
use crate::numerics::{dot, l2_norm, DenseMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n_languages: usize,
    pub n_groups: usize,
    pub docs_per_group_per_lang: usize,
    /// alpha: weight of the language direction in every vector.
    pub language_strength: f64,
    /// sigma: norm of the per-vector noise component.
    pub semantic_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.d == 0 || self.n_languages == 0 || self.n_groups == 0 {
            return Err(DataError::Infeasible("d, languages, groups must be positive".into()));
        }
        if self.docs_per_group_per_lang == 0 {
            return Err(DataError::Infeasible("docs_per_group_per_lang must be positive".into()));
        }
        if self.language_strength < 0.0 || self.semantic_noise < 0.0 {
            return Err(DataError::Infeasible("alpha and sigma must be non-negative".into()));
        }
        if self.d <= self.n_languages {
            return Err(DataError::Infeasible(format!(
                "d = {} leaves no semantic subspace beyond {} language axes",
                self.d, self.n_languages
            )));
        }
        Ok(())
    }
}

pub struct SyntheticOutput {
    pub docs: EmbeddingSet,
    pub queries: EmbeddingSet,
    pub warnings: Vec<String>,
}

/// Language code for synthetic language index `i`.
pub fn lang_code(i: usize) -> String {
    format!("l{i}")
}

fn group_id(g: usize) -> String {
    format!("g{g:04}")
}

fn normalize_in_place(v: &mut [f64]) -> Result<(), DataError> {
    let n = l2_norm(v);
    if n < 1e-12 {
        return Err(DataError::Infeasible("degenerate direction draw".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= p * bi;
        }
    }
}

/// Generates one document pool and one query set. Documents are ordered by
/// (group, language, copy); one query per (group, language) with independent
/// noise. All draws come from a single seeded stream, so equal specs produce
/// identical bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticOutput, DataError> {
    spec.validate()?;
    let mut warnings = Vec::new();
    if spec.d < spec.n_languages + spec.n_groups {
        warnings.push(format!(
            "d = {} below languages + groups = {}; group directions are only \
             approximately orthogonal to each other",
            spec.d,
            spec.n_languages + spec.n_groups
        ));
    }
    let mut rng = SeededRng::new(spec.seed);

    // Language axes: exactly orthonormal (Gram-Schmidt on Gaussian draws).
    let mut lang_axes: Vec<Vec<f64>> = Vec::with_capacity(spec.n_languages);
    for _ in 0..spec.n_languages {
        let mut v = rng.normal_vec(spec.d);
        project_out(&mut v, &lang_axes);
        normalize_in_place(&mut v)?;
        lang_axes.push(v);
    }
    // Group directions: unit vectors orthogonal to every language axis.
    let mut group_dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_groups);
    for _ in 0..spec.n_groups {
        let mut v = rng.normal_vec(spec.d);
        project_out(&mut v, &lang_axes);
        normalize_in_place(&mut v)?;
        group_dirs.push(v);
    }

    let alpha = spec.language_strength;
    let sigma = spec.semantic_noise;
    let draw = |g: usize, l: usize, rng: &mut SeededRng| -> Result<Vec<f64>, DataError> {
        let mut v: Vec<f64> = group_dirs[g].clone();
        for (vi, ui) in v.iter_mut().zip(&lang_axes[l]) {
            *vi += alpha * ui;
        }
        if sigma > 0.0 {
            let mut noise = rng.normal_vec(spec.d);
            normalize_in_place(&mut noise)?;
            for (vi, ni) in v.iter_mut().zip(&noise) {
                *vi += sigma * ni;
            }
        }
        normalize_in_place(&mut v)?;
        Ok(v)
    };

    let provenance = Some(json!({ "synthetic_spec": spec }));
    let n_docs = spec.n_groups * spec.n_languages * spec.docs_per_group_per_lang;
    let mut doc_data = Vec::with_capacity(n_docs * spec.d);
    let mut doc_rows = Vec::with_capacity(n_docs);
    for g in 0..spec.n_groups {
        for l in 0..spec.n_languages {
            for c in 0..spec.docs_per_group_per_lang {
                doc_data.extend(draw(g, l, &mut rng)?);
                doc_rows.push(RowMeta {
                    id: format!("doc-{g:04}-{}-{c}", lang_code(l)),
                    lang: lang_code(l),
                    group: Some(group_id(g)),
                });
            }
        }
    }
    let n_queries = spec.n_groups * spec.n_languages;
    let mut query_data = Vec::with_capacity(n_queries * spec.d);
    let mut query_rows = Vec::with_capacity(n_queries);
    for g in 0..spec.n_groups {
        for l in 0..spec.n_languages {
            query_data.extend(draw(g, l, &mut rng)?);
            query_rows.push(RowMeta {
                id: format!("qry-{g:04}-{}", lang_code(l)),
                lang: lang_code(l),
                group: Some(group_id(g)),
            });
        }
    }

    let docs = EmbeddingSet::new(
        DenseMatrix::new(n_docs, spec.d, doc_data)?,
        Manifest { rows: doc_rows, transform: None, provenance: provenance.clone() },
    )?;
    let queries = EmbeddingSet::new(
        DenseMatrix::new(n_queries, spec.d, query_data)?,
        Manifest { rows: query_rows, transform: None, provenance },
    )?;
    Ok(SyntheticOutput { docs, queries, warnings })
}
