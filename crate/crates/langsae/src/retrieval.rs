//! Exact cosine retrieval over a mixed-language document pool.
//!
//! No index: every query scores every document. Tie-breaking at equal score
//! is by doc_id ascending, which makes rankings canonical under pool row
//! permutation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{AtlasError, LanguageId};
use crate::data::{EmbeddingSet, TransformStamp};
use crate::numerics::{dot, l2_norm, DenseMatrix, DenseVector, NumericsError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate doc id {0:?}")]
    DuplicateDocId(String),
    #[error("duplicate query id {0:?}")]
    DuplicateQueryId(String),
    #[error("row {id:?} has no alignment group")]
    MissingGroup { id: String },
    #[error("row {id:?} has norm {norm}, outside 1e-3 of unit")]
    NotNormalized { id: String, norm: f64 },
    #[error("query {query_id:?} references group {group:?} absent from the pool")]
    UnknownGroup { query_id: String, group: String },
    #[error("cutoff {cutoff} exceeds pool size {pool}")]
    CutoffExceedsPool { cutoff: usize, pool: usize },
    #[error("cutoff must be at least 1")]
    ZeroCutoff,
    #[error(
        "pool and queries went through different transforms (pool: {pool}, queries: {queries}); \
         both sides of a comparison must use the same transformation"
    )]
    MixedTransform { pool: String, queries: String },
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const NORM_TOLERANCE: f64 = 1e-3;

fn stamp_label(stamp: &Option<TransformStamp>) -> String {
    match stamp {
        None => "none".to_string(),
        Some(s) => {
            let mut label = s.method.clone();
            if let Some(strategy) = &s.strategy {
                label.push('/');
                label.push_str(strategy);
            }
            if let Some(h) = &s.atlas_sha256 {
                label.push('/');
                label.push_str(&h[..h.len().min(12)]);
            }
            label
        }
    }
}

/// Re-normalizes rows that are within `NORM_TOLERANCE` of unit length;
/// anything further off is treated as un-normalized ingestion.
fn normalized_rows(set: &EmbeddingSet) -> Result<DenseMatrix, RetrievalError> {
    let mut matrix = set.matrix.clone();
    for r in 0..matrix.rows() {
        let row = matrix.row_mut(r);
        let norm = l2_norm(row);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(RetrievalError::NotNormalized {
                id: set.manifest.rows[r].id.clone(),
                norm,
            });
        }
        for v in row {
            *v /= norm;
        }
    }
    Ok(matrix)
}

/// Immutable search target: unit-norm vectors with ids, languages and
/// alignment groups.
#[derive(Debug, Clone)]
pub struct DocumentPool {
    vectors: DenseMatrix,
    doc_ids: Vec<String>,
    languages: Vec<LanguageId>,
    align_groups: Vec<String>,
    by_group: BTreeMap<String, Vec<usize>>,
    transform: Option<TransformStamp>,
}

impl DocumentPool {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn doc_id(&self, i: usize) -> &str {
        &self.doc_ids[i]
    }

    pub fn language(&self, i: usize) -> &LanguageId {
        &self.languages[i]
    }

    pub fn group(&self, i: usize) -> &str {
        &self.align_groups[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Row indices of every document in an alignment group.
    pub fn docs_in_group(&self, group: &str) -> &[usize] {
        self.by_group.get(group).map_or(&[], Vec::as_slice)
    }

    pub fn language_of_doc(&self, doc_id: &str) -> Option<&LanguageId> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| &self.languages[i])
    }

    pub fn transform(&self) -> &Option<TransformStamp> {
        &self.transform
    }
}

pub fn build_pool(docs: &EmbeddingSet) -> Result<DocumentPool, RetrievalError> {
    let vectors = normalized_rows(docs)?;
    let mut doc_ids = Vec::with_capacity(docs.len());
    let mut languages = Vec::with_capacity(docs.len());
    let mut align_groups = Vec::with_capacity(docs.len());
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for (i, row) in docs.manifest.rows.iter().enumerate() {
        if seen.insert(&row.id, ()).is_some() {
            return Err(RetrievalError::DuplicateDocId(row.id.clone()));
        }
        let group = row
            .group
            .clone()
            .ok_or_else(|| RetrievalError::MissingGroup { id: row.id.clone() })?;
        by_group.entry(group.clone()).or_default().push(i);
        doc_ids.push(row.id.clone());
        languages.push(LanguageId::new(row.lang.clone())?);
        align_groups.push(group);
    }
    Ok(DocumentPool {
        vectors,
        doc_ids,
        languages,
        align_groups,
        by_group,
        transform: docs.manifest.transform.clone(),
    })
}

/// Queries with their relevance definition: all pool documents sharing the
/// query's alignment group.
#[derive(Debug, Clone)]
pub struct QuerySet {
    vectors: DenseMatrix,
    query_ids: Vec<String>,
    languages: Vec<LanguageId>,
    relevant_groups: Vec<String>,
    transform: Option<TransformStamp>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    pub fn query_id(&self, i: usize) -> &str {
        &self.query_ids[i]
    }

    pub fn language(&self, i: usize) -> &LanguageId {
        &self.languages[i]
    }

    pub fn relevant_group(&self, i: usize) -> &str {
        &self.relevant_groups[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn transform(&self) -> &Option<TransformStamp> {
        &self.transform
    }
}

pub fn build_query_set(
    queries: &EmbeddingSet,
    pool: &DocumentPool,
) -> Result<QuerySet, RetrievalError> {
    let vectors = normalized_rows(queries)?;
    let mut query_ids = Vec::with_capacity(queries.len());
    let mut languages = Vec::with_capacity(queries.len());
    let mut relevant_groups = Vec::with_capacity(queries.len());
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for row in &queries.manifest.rows {
        if seen.insert(&row.id, ()).is_some() {
            return Err(RetrievalError::DuplicateQueryId(row.id.clone()));
        }
        let group = row
            .group
            .clone()
            .ok_or_else(|| RetrievalError::MissingGroup { id: row.id.clone() })?;
        if pool.docs_in_group(&group).is_empty() {
            return Err(RetrievalError::UnknownGroup {
                query_id: row.id.clone(),
                group,
            });
        }
        query_ids.push(row.id.clone());
        languages.push(LanguageId::new(row.lang.clone())?);
        relevant_groups.push(group);
    }
    Ok(QuerySet {
        vectors,
        query_ids,
        languages,
        relevant_groups,
        transform: queries.manifest.transform.clone(),
    })
}

pub const DEFAULT_CUTOFF: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// One query's ranking, in the run-output schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub lang: LanguageId,
    pub ranked: Vec<RankedEntry>,
}

fn check_cutoff(pool: &DocumentPool, cutoff: usize) -> Result<(), RetrievalError> {
    if cutoff == 0 {
        return Err(RetrievalError::ZeroCutoff);
    }
    if cutoff > pool.len() {
        return Err(RetrievalError::CutoffExceedsPool { cutoff, pool: pool.len() });
    }
    Ok(())
}

/// Top-`cutoff` documents by inner product with `q`. `q` must be within
/// 1e-3 of unit norm; it is re-normalized before scoring so scores are true
/// cosines.
pub fn search(
    pool: &DocumentPool,
    q: &DenseVector,
    cutoff: usize,
) -> Result<Vec<RankedEntry>, RetrievalError> {
    check_cutoff(pool, cutoff)?;
    if q.dim() != pool.dim() {
        return Err(NumericsError::DimensionMismatch(format!(
            "query dim {} != pool dim {}",
            q.dim(),
            pool.dim()
        ))
        .into());
    }
    let norm = l2_norm(q.data());
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(RetrievalError::NotNormalized { id: "<query>".to_string(), norm });
    }
    let qv: Vec<f64> = q.data().iter().map(|x| x / norm).collect();
    let scores: Vec<f64> = (0..pool.len()).map(|i| dot(pool.vectors.row(i), &qv)).collect();
    let better = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .expect("scores are finite")
            .then_with(|| pool.doc_ids[*a].cmp(&pool.doc_ids[*b]))
    };
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    if cutoff < idx.len() {
        idx.select_nth_unstable_by(cutoff - 1, better);
        idx.truncate(cutoff);
    }
    idx.sort_unstable_by(better);
    Ok(idx
        .into_iter()
        .map(|i| RankedEntry { doc_id: pool.doc_ids[i].clone(), score: scores[i] })
        .collect())
}

/// [`search`] over every query, in query order.
pub fn search_batch(
    pool: &DocumentPool,
    queries: &QuerySet,
    cutoff: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    check_cutoff(pool, cutoff)?;
    (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = DenseVector::new(queries.vectors.row(qi).to_vec())?;
            let ranked = search(pool, &q, cutoff)?;
            Ok(RankedList {
                query_id: queries.query_ids[qi].clone(),
                lang: queries.languages[qi].clone(),
                ranked,
            })
        })
        .collect()
}

/// Refuses to score queries against a pool that went through a different
/// transformation.
pub fn verify_same_transform(
    pool: &DocumentPool,
    queries: &QuerySet,
) -> Result<(), RetrievalError> {
    if pool.transform != queries.transform {
        return Err(RetrievalError::MixedTransform {
            pool: stamp_label(&pool.transform),
            queries: stamp_label(&queries.transform),
        });
    }
    Ok(())
}

/// Stamp check plus [`search_batch`]: the standard retrieval entry point.
pub fn run_search(
    pool: &DocumentPool,
    queries: &QuerySet,
    cutoff: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    verify_same_transform(pool, queries)?;
    search_batch(pool, queries, cutoff)
}

/// Sidecar manifest describing how a run file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pool_sha256: Option<String>,
    pub transform: Option<TransformStamp>,
    pub cutoff: usize,
    pub n_queries: usize,
    /// Search method; always "exact" (no ANN index).
    pub method: String,
}

/// Writes one JSON object per line: {query_id, lang, ranked: [{doc_id, score}]}.
pub fn write_run(path: &Path, results: &[RankedList]) -> Result<(), RetrievalError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for list in results {
        serde_json::to_writer(&mut out, list)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_run(path: &Path) -> Result<Vec<RankedList>, RetrievalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut results = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str(&line)?);
    }
    Ok(results)
}

pub fn write_run_manifest(path: &Path, manifest: &RunManifest) -> Result<(), RetrievalError> {
    Ok(fs::write(path, serde_json::to_vec_pretty(manifest)?)?)
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest, RetrievalError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Manifest, RowMeta};
    use crate::numerics::SeededRng;

    fn set_from(rows: Vec<(&str, &str, Option<&str>, Vec<f64>)>) -> EmbeddingSet {
        let matrix = DenseMatrix::from_rows(
            &rows.iter().map(|(_, _, _, v)| v.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let manifest = Manifest {
            rows: rows
                .iter()
                .map(|(id, lang, group, _)| RowMeta {
                    id: id.to_string(),
                    lang: lang.to_string(),
                    group: group.map(str::to_string),
                })
                .collect(),
            transform: None,
            provenance: None,
        };
        EmbeddingSet::new(matrix, manifest).unwrap()
    }

    /// n unit vectors in dimension d >= n along distinct axes.
    fn axis_pool(ids: &[(&str, &str, &str)], d: usize) -> EmbeddingSet {
        let rows = ids
            .iter()
            .enumerate()
            .map(|(i, (id, lang, group))| {
                let mut v = vec![0.0; d];
                v[i] = 1.0;
                (*id, *lang, Some(*group), v)
            })
            .collect();
        set_from(rows)
    }

    #[test]
    fn pool_of_two_languages_three_groups() {
        let docs = axis_pool(
            &[
                ("d0", "aa", "g0"),
                ("d1", "aa", "g1"),
                ("d2", "aa", "g2"),
                ("d3", "bb", "g0"),
                ("d4", "bb", "g1"),
                ("d5", "bb", "g2"),
            ],
            6,
        );
        let pool = build_pool(&docs).unwrap();
        assert_eq!(pool.len(), 6);
        assert_eq!(pool.docs_in_group("g1"), &[1, 4]);
        assert_eq!(pool.doc_id(3), "d3");
        assert_eq!(pool.language(3).as_str(), "bb");
    }

    #[test]
    fn duplicate_and_incomplete_rows_rejected() {
        let docs = set_from(vec![
            ("d0", "aa", Some("g0"), vec![1.0, 0.0]),
            ("d0", "bb", Some("g1"), vec![0.0, 1.0]),
        ]);
        assert!(matches!(build_pool(&docs), Err(RetrievalError::DuplicateDocId(id)) if id == "d0"));

        let docs = set_from(vec![("d0", "aa", None, vec![1.0, 0.0])]);
        assert!(matches!(build_pool(&docs), Err(RetrievalError::MissingGroup { .. })));
    }

    #[test]
    fn norm_guard_renormalizes_or_rejects() {
        // Slightly off unit: accepted and fixed.
        let docs = set_from(vec![("d0", "aa", Some("g0"), vec![1.0005, 0.0])]);
        let pool = build_pool(&docs).unwrap();
        assert!((l2_norm(pool.vector(0)) - 1.0).abs() < 1e-12);

        // Far off unit: rejected.
        let docs = set_from(vec![("d0", "aa", Some("g0"), vec![1.5, 0.0])]);
        assert!(matches!(build_pool(&docs), Err(RetrievalError::NotNormalized { norm, .. }) if norm > 1.4));

        // Zero row: rejected.
        let docs = set_from(vec![("d0", "aa", Some("g0"), vec![0.0, 0.0])]);
        assert!(matches!(build_pool(&docs), Err(RetrievalError::NotNormalized { .. })));
    }

    #[test]
    fn query_must_reference_existing_group() {
        let docs = axis_pool(&[("d0", "aa", "g0")], 2);
        let pool = build_pool(&docs).unwrap();
        let queries = set_from(vec![("q0", "aa", Some("g9"), vec![1.0, 0.0])]);
        assert!(matches!(
            build_query_set(&queries, &pool),
            Err(RetrievalError::UnknownGroup { .. })
        ));
    }

    #[test]
    fn exact_match_ranks_first_with_unit_score() {
        let docs = axis_pool(
            &[("d0", "aa", "g0"), ("d1", "aa", "g1"), ("d2", "aa", "g2")],
            3,
        );
        let pool = build_pool(&docs).unwrap();
        let q = DenseVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        let ranked = search(&pool, &q, 3).unwrap();
        assert_eq!(ranked[0].doc_id, "d1");
        assert!((ranked[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pool_ties_break_by_doc_id() {
        let docs = axis_pool(
            &[("zz", "aa", "g0"), ("mm", "aa", "g1"), ("aa", "aa", "g2")],
            4,
        );
        let pool = build_pool(&docs).unwrap();
        let q = DenseVector::new(vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let ranked = search(&pool, &q, 3).unwrap();
        let ids: Vec<&str> = ranked.iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["aa", "mm", "zz"]);
        assert!(ranked.iter().all(|e| e.score.abs() < 1e-12));
    }

    fn random_instance(
        rng: &mut SeededRng,
        n_docs: usize,
        d: usize,
    ) -> (EmbeddingSet, Vec<Vec<f64>>) {
        let mut rows = Vec::new();
        let mut raw = Vec::new();
        for i in 0..n_docs {
            let v = rng.normal_vec(d);
            let n = l2_norm(&v);
            let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
            raw.push(unit.clone());
            rows.push((format!("d{i:04}"), "aa".to_string(), Some(format!("g{i}")), unit));
        }
        let matrix = DenseMatrix::from_rows(
            &rows.iter().map(|(_, _, _, v)| v.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let manifest = Manifest {
            rows: rows
                .iter()
                .map(|(id, lang, group, _)| RowMeta {
                    id: id.clone(),
                    lang: lang.clone(),
                    group: group.clone(),
                })
                .collect(),
            transform: None,
            provenance: None,
        };
        (EmbeddingSet::new(matrix, manifest).unwrap(), raw)
    }

    #[test]
    fn full_cutoff_matches_sort_oracle_and_prefix_property() {
        let mut rng = SeededRng::new(13);
        let (docs, raw) = random_instance(&mut rng, 40, 8);
        let pool = build_pool(&docs).unwrap();
        for _ in 0..20 {
            let qv = {
                let v = rng.normal_vec(8);
                let n = l2_norm(&v);
                v.iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let q = DenseVector::new(qv.clone()).unwrap();
            let full = search(&pool, &q, 40).unwrap();

            // Oracle: score everything, stable sort by (score desc, id asc).
            let mut oracle: Vec<(String, f64)> = raw
                .iter()
                .enumerate()
                .map(|(i, dvec)| (format!("d{i:04}"), dot(dvec, &qv)))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            for (got, want) in full.iter().zip(&oracle) {
                assert_eq!(got.doc_id, want.0);
                assert!((got.score - want.1).abs() < 1e-12);
            }
            // Scores are valid cosines and non-increasing.
            for w in full.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            assert!(full.iter().all(|e| e.score.abs() <= 1.0 + 1e-6));

            // Prefix property.
            let short = search(&pool, &q, 7).unwrap();
            assert_eq!(&full[..7], &short[..]);
        }
    }

    #[test]
    fn ranking_invariant_under_pool_permutation() {
        let mut rng = SeededRng::new(14);
        let (docs, _) = random_instance(&mut rng, 25, 6);
        let pool = build_pool(&docs).unwrap();
        let mut perm: Vec<usize> = (0..25).collect();
        rng.shuffle(&mut perm);
        let pool_perm = build_pool(&docs.subset(&perm)).unwrap();
        for _ in 0..10 {
            let v = rng.normal_vec(6);
            let n = l2_norm(&v);
            let q = DenseVector::new(v.iter().map(|x| x / n).collect()).unwrap();
            let a = search(&pool, &q, 25).unwrap();
            let b = search(&pool_perm, &q, 25).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_matches_per_query_oracle_and_preserves_order() {
        let mut rng = SeededRng::new(15);
        let (docs, _) = random_instance(&mut rng, 200, 10);
        let pool = build_pool(&docs).unwrap();
        let mut qrows = Vec::new();
        for i in 0..50 {
            let v = rng.normal_vec(10);
            let n = l2_norm(&v);
            let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
            qrows.push((format!("q{i:03}"), "aa".to_string(), Some(format!("g{}", i % 200)), unit));
        }
        let matrix = DenseMatrix::from_rows(
            &qrows.iter().map(|(_, _, _, v)| v.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let manifest = Manifest {
            rows: qrows
                .iter()
                .map(|(id, lang, group, _)| RowMeta {
                    id: id.clone(),
                    lang: lang.clone(),
                    group: group.clone(),
                })
                .collect(),
            transform: None,
            provenance: None,
        };
        let queries =
            build_query_set(&EmbeddingSet::new(matrix, manifest).unwrap(), &pool).unwrap();
        let results = run_search(&pool, &queries, DEFAULT_CUTOFF).unwrap();
        assert_eq!(results.len(), 50);
        for (qi, list) in results.iter().enumerate() {
            assert_eq!(list.query_id, format!("q{qi:03}"));
            assert_eq!(list.ranked.len(), DEFAULT_CUTOFF);
            let q = DenseVector::new(queries.vector(qi).to_vec()).unwrap();
            let single = search(&pool, &q, DEFAULT_CUTOFF).unwrap();
            assert_eq!(list.ranked, single);
        }
    }

    #[test]
    fn cutoff_bounds_enforced() {
        let docs = axis_pool(&[("d0", "aa", "g0"), ("d1", "aa", "g1")], 2);
        let pool = build_pool(&docs).unwrap();
        let q = DenseVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(search(&pool, &q, 0), Err(RetrievalError::ZeroCutoff)));
        assert!(matches!(
            search(&pool, &q, 3),
            Err(RetrievalError::CutoffExceedsPool { cutoff: 3, pool: 2 })
        ));
    }

    #[test]
    fn mixed_transform_stamps_refused() {
        let stamp = TransformStamp {
            method: "sae-edit".to_string(),
            checkpoint_sha256: Some("c".repeat(64)),
            atlas_sha256: Some("a".repeat(64)),
            strategy: Some("unique-plus-overlapping".to_string()),
        };
        let mut docs = axis_pool(&[("d0", "aa", "g0"), ("d1", "bb", "g0")], 2);
        docs.manifest.transform = Some(stamp.clone());
        let pool = build_pool(&docs).unwrap();

        // Raw queries against edited docs: refused.
        let qset = set_from(vec![("q0", "aa", Some("g0"), vec![1.0, 0.0])]);
        let queries = build_query_set(&qset, &pool).unwrap();
        assert!(matches!(
            run_search(&pool, &queries, 1),
            Err(RetrievalError::MixedTransform { .. })
        ));

        // Same stamp on both sides: allowed.
        let mut qset2 = set_from(vec![("q0", "aa", Some("g0"), vec![1.0, 0.0])]);
        qset2.manifest.transform = Some(stamp);
        let queries2 = build_query_set(&qset2, &pool).unwrap();
        assert!(run_search(&pool, &queries2, 1).is_ok());
    }

    #[test]
    fn run_files_round_trip() {
        let results = vec![
            RankedList {
                query_id: "q0".to_string(),
                lang: LanguageId::new("aa").unwrap(),
                ranked: vec![
                    RankedEntry { doc_id: "d1".to_string(), score: 0.987654321012345 },
                    RankedEntry { doc_id: "d0".to_string(), score: -0.25 },
                ],
            },
            RankedList {
                query_id: "q1".to_string(),
                lang: LanguageId::new("bb").unwrap(),
                ranked: vec![RankedEntry { doc_id: "d0".to_string(), score: 1.0 }],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        write_run(&path, &results).unwrap();
        assert_eq!(read_run(&path).unwrap(), results);

        // Schema check on the raw line.
        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["query_id"], "q0");
        assert_eq!(v["lang"], "aa");
        assert_eq!(v["ranked"][0]["doc_id"], "d1");

        let manifest = RunManifest {
            pool_sha256: Some("f".repeat(64)),
            transform: None,
            cutoff: 20,
            n_queries: 2,
            method: "exact".to_string(),
        };
        let mpath = dir.path().join("run.manifest.json");
        write_run_manifest(&mpath, &manifest).unwrap();
        assert_eq!(read_run_manifest(&mpath).unwrap(), manifest);
    }
}
