//! Retrieval metrics and the analysis drivers built on them: macro-averaged
//! nDCG/recall, distractor accounting after ground-truth removal, threshold
//! sweeps and masking-strategy ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{
    atlas_summary, build_atlas, ActivationFrequencyTable, AtlasError, FeatureAtlas, LanguageId,
    MaskStrategy,
};
use crate::data::{EmbeddingSet, TransformStamp};
use crate::editor::{control_batch, edit_batch, EditPlan, EditorError, ZeroVectorPolicy};
use crate::retrieval::{
    build_pool, build_query_set, run_search, DocumentPool, QuerySet, RankedList, RetrievalError,
};
use crate::sae::SaeModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("relevant set is empty for query {0:?}")]
    EmptyRelevantSet(String),
    #[error("k = {k} exceeds ranked list length {len}")]
    KExceedsList { k: usize, len: usize },
    #[error("{results} ranked lists for {queries} queries")]
    ResultCountMismatch { results: usize, queries: usize },
    #[error("no ranked list for query {0:?}")]
    MissingResult(String),
    #[error("tau grid is empty")]
    EmptyGrid,
    #[error("tau grid must be strictly decreasing")]
    GridNotDecreasing,
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of the relevant set present in the top k.
pub fn recall_at_k(
    ranked: &RankedList,
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevantSet(ranked.query_id.clone()));
    }
    if k > ranked.ranked.len() {
        return Err(EvalError::KExceedsList { k, len: ranked.ranked.len() });
    }
    let hits = ranked.ranked[..k].iter().filter(|e| relevant.contains(&e.doc_id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-gain nDCG with the ideal ranking truncated at min(|relevant|, k).
pub fn ndcg_at_k(
    ranked: &RankedList,
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevantSet(ranked.query_id.clone()));
    }
    if k > ranked.ranked.len() {
        return Err(EvalError::KExceedsList { k, len: ranked.ranked.len() });
    }
    let mut dcg = 0.0;
    for (r, entry) in ranked.ranked[..k].iter().enumerate() {
        if relevant.contains(&entry.doc_id) {
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let ideal_len = relevant.len().min(k);
    let idcg: f64 = (0..ideal_len).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub ndcg_at_k: f64,
    pub recall_at_k: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub ndcg_at_k: f64,
    pub recall_at_k: f64,
}

/// Per-language means plus the macro average that weights every query
/// language equally, regardless of query counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub per_language: BTreeMap<LanguageId, LanguageMetrics>,
    pub macro_avg: MacroMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Relevant doc-id set for a query: every pool document sharing its
/// alignment group.
pub fn relevant_ids(pool: &DocumentPool, group: &str) -> BTreeSet<String> {
    pool.docs_in_group(group).iter().map(|&i| pool.doc_id(i).to_string()).collect()
}

fn results_by_query<'a>(
    results: &'a [RankedList],
    queries: &QuerySet,
) -> Result<Vec<&'a RankedList>, EvalError> {
    if results.len() != queries.len() {
        return Err(EvalError::ResultCountMismatch {
            results: results.len(),
            queries: queries.len(),
        });
    }
    let by_id: BTreeMap<&str, &RankedList> =
        results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    (0..queries.len())
        .map(|qi| {
            by_id
                .get(queries.query_id(qi))
                .copied()
                .ok_or_else(|| EvalError::MissingResult(queries.query_id(qi).to_string()))
        })
        .collect()
}

pub fn evaluate_run(
    results: &[RankedList],
    queries: &QuerySet,
    pool: &DocumentPool,
    k: usize,
) -> Result<MetricsReport, EvalError> {
    let ordered = results_by_query(results, queries)?;
    let mut sums: BTreeMap<LanguageId, (f64, f64, usize)> = BTreeMap::new();
    for (qi, list) in ordered.iter().enumerate() {
        let relevant = relevant_ids(pool, queries.relevant_group(qi));
        let ndcg = ndcg_at_k(list, &relevant, k)?;
        let recall = recall_at_k(list, &relevant, k)?;
        let entry = sums.entry(queries.language(qi).clone()).or_insert((0.0, 0.0, 0));
        entry.0 += ndcg;
        entry.1 += recall;
        entry.2 += 1;
    }
    let mut warnings = Vec::new();
    let pool_langs: BTreeSet<&LanguageId> = (0..pool.len()).map(|i| pool.language(i)).collect();
    for lang in pool_langs {
        if !sums.contains_key(lang) {
            warnings.push(format!("language {lang} has zero queries; excluded from macro"));
        }
    }
    let mut per_language = BTreeMap::new();
    let (mut macro_ndcg, mut macro_recall) = (0.0, 0.0);
    for (lang, (ndcg_sum, recall_sum, n)) in &sums {
        let ndcg = ndcg_sum / *n as f64;
        let recall = recall_sum / *n as f64;
        macro_ndcg += ndcg;
        macro_recall += recall;
        per_language
            .insert(lang.clone(), LanguageMetrics { ndcg_at_k: ndcg, recall_at_k: recall, n_queries: *n });
    }
    let n_langs = sums.len().max(1) as f64;
    Ok(MetricsReport {
        k,
        per_language,
        macro_avg: MacroMetrics { ndcg_at_k: macro_ndcg / n_langs, recall_at_k: macro_recall / n_langs },
        warnings,
    })
}

/// What remains in the top k after removing each query's ground truth,
/// counted by document language and averaged over the queries of one query
/// language.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistractorReport {
    pub query_lang: LanguageId,
    /// Mean count of surviving top-k docs per retrieved language.
    pub counts: BTreeMap<LanguageId, f64>,
    /// Sum of the means; total + gap = k exactly.
    pub total_distractors: f64,
    /// Mean number of ground-truth documents retrieved.
    pub gap_to_cutoff: f64,
    pub n_queries: usize,
}

pub fn distractor_analysis(
    results: &[RankedList],
    queries: &QuerySet,
    pool: &DocumentPool,
    k: usize,
) -> Result<Vec<DistractorReport>, EvalError> {
    let ordered = results_by_query(results, queries)?;
    let doc_lang: BTreeMap<&str, &LanguageId> =
        (0..pool.len()).map(|i| (pool.doc_id(i), pool.language(i))).collect();
    // Per query language: per-retrieved-language integer sums and counts.
    let mut sums: BTreeMap<LanguageId, (BTreeMap<LanguageId, u64>, usize)> = BTreeMap::new();
    for (qi, list) in ordered.iter().enumerate() {
        if k > list.ranked.len() {
            return Err(EvalError::KExceedsList { k, len: list.ranked.len() });
        }
        let relevant = relevant_ids(pool, queries.relevant_group(qi));
        if relevant.is_empty() {
            return Err(EvalError::EmptyRelevantSet(list.query_id.clone()));
        }
        let entry = sums.entry(queries.language(qi).clone()).or_default();
        entry.1 += 1;
        for e in &list.ranked[..k] {
            if relevant.contains(&e.doc_id) {
                continue;
            }
            let lang = doc_lang
                .get(e.doc_id.as_str())
                .ok_or_else(|| EvalError::MissingResult(e.doc_id.clone()))?;
            *entry.0.entry((*lang).clone()).or_insert(0) += 1;
        }
    }
    let mut reports = Vec::new();
    for (query_lang, (counts_sum, n)) in sums {
        let mut counts = BTreeMap::new();
        // total is the sum of the published means, so total + gap = k holds
        // exactly on the reported numbers.
        let mut total = 0.0;
        for (lang, sum) in counts_sum {
            let mean = sum as f64 / n as f64;
            total += mean;
            counts.insert(lang, mean);
        }
        reports.push(DistractorReport {
            query_lang,
            counts,
            total_distractors: total,
            gap_to_cutoff: k as f64 - total,
            n_queries: n,
        });
    }
    Ok(reports)
}

/// Documents and queries to edit and score as one unit.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub docs: EmbeddingSet,
    pub queries: EmbeddingSet,
    pub cutoff: usize,
}

fn stamp(method: &str, strategy: Option<MaskStrategy>) -> TransformStamp {
    TransformStamp {
        method: method.to_string(),
        checkpoint_sha256: None,
        atlas_sha256: None,
        strategy: strategy.map(|s| s.as_str().to_string()),
    }
}

/// Edits both sides with the same plan, retrieves, and evaluates.
pub fn edited_run_metrics(
    model: &SaeModel,
    plan: &EditPlan,
    bench: &Benchmark,
) -> Result<MetricsReport, EvalError> {
    let s = stamp("sae-edit", Some(plan.strategy));
    let docs = edit_batch(model, plan, &bench.docs, s.clone())?;
    let queries = edit_batch(model, plan, &bench.queries, s)?;
    let pool = build_pool(&docs.set)?;
    let qset = build_query_set(&queries.set, &pool)?;
    let results = run_search(&pool, &qset, bench.cutoff)?;
    evaluate_run(&results, &qset, &pool, bench.cutoff)
}

/// Reconstruction-control run: both sides round-tripped with no masking.
pub fn control_run_metrics(model: &SaeModel, bench: &Benchmark) -> Result<MetricsReport, EvalError> {
    let s = stamp("reconstruction-control", None);
    let docs = control_batch(model, &bench.docs, s.clone())?;
    let queries = control_batch(model, &bench.queries, s)?;
    let pool = build_pool(&docs.set)?;
    let qset = build_query_set(&queries.set, &pool)?;
    let results = run_search(&pool, &qset, bench.cutoff)?;
    evaluate_run(&results, &qset, &pool, bench.cutoff)
}

/// Raw run: vectors scored as ingested, no model in the loop.
pub fn raw_run_metrics(bench: &Benchmark) -> Result<MetricsReport, EvalError> {
    let pool = build_pool(&bench.docs)?;
    let qset = build_query_set(&bench.queries, &pool)?;
    let results = run_search(&pool, &qset, bench.cutoff)?;
    evaluate_run(&results, &qset, &pool, bench.cutoff)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub macro_ndcg: f64,
    pub macro_recall: f64,
    pub mean_frequent_units: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub strategy: MaskStrategy,
    pub cutoff: usize,
    pub rows: Vec<SweepRow>,
}

/// For each tau in a strictly decreasing grid: threshold the frequency
/// table, edit both benchmark sides, retrieve, and record macro metrics
/// next to the mean frequent-set size.
pub fn tau_sweep(
    model: &SaeModel,
    table: &ActivationFrequencyTable,
    bench: &Benchmark,
    tau_grid: &[f64],
    strategy: MaskStrategy,
) -> Result<SweepReport, EvalError> {
    if tau_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if tau_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(EvalError::GridNotDecreasing);
    }
    let mut rows = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let atlas = build_atlas(table, tau)?;
        let summary = atlas_summary(&atlas);
        let plan = EditPlan {
            atlas,
            strategy,
            zero_vector_policy: ZeroVectorPolicy::FallbackToReconstruction,
        };
        let metrics = edited_run_metrics(model, &plan, bench)?;
        rows.push(SweepRow {
            tau,
            macro_ndcg: metrics.macro_avg.ndcg_at_k,
            macro_recall: metrics.macro_avg.recall_at_k,
            mean_frequent_units: summary.mean_frequent_units,
        });
    }
    Ok(SweepReport { strategy, cutoff: bench.cutoff, rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub macro_ndcg: f64,
    pub macro_recall: f64,
}

/// Compares no removal (reconstruction control) against both masking
/// strategies under identical conditions.
pub fn ablation_overlap(
    model: &SaeModel,
    atlas: &FeatureAtlas,
    bench: &Benchmark,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::with_capacity(3);
    let control = control_run_metrics(model, bench)?;
    rows.push(AblationRow {
        strategy: "no-removal".to_string(),
        macro_ndcg: control.macro_avg.ndcg_at_k,
        macro_recall: control.macro_avg.recall_at_k,
    });
    for strategy in [MaskStrategy::UniqueOnly, MaskStrategy::UniquePlusOverlapping] {
        let plan = EditPlan::new(atlas.clone(), strategy);
        let metrics = edited_run_metrics(model, &plan, bench)?;
        rows.push(AblationRow {
            strategy: strategy.as_str().to_string(),
            macro_ndcg: metrics.macro_avg.ndcg_at_k,
            macro_recall: metrics.macro_avg.recall_at_k,
        });
    }
    Ok(rows)
}

fn table_header(out: &mut String, columns: &[(&str, usize)]) {
    for (name, width) in columns {
        let _ = write!(out, "{name:>width$}  ");
    }
    out.pop();
    out.pop();
    out.push('\n');
    let total: usize = columns.iter().map(|(_, w)| w + 2).sum::<usize>() - 2;
    out.push_str(&"-".repeat(total));
    out.push('\n');
}

pub fn render_metrics_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let k = report.k;
    let _ = writeln!(out, "retrieval metrics @{k}");
    table_header(&mut out, &[("lang", 8), ("ndcg", 8), ("recall", 8), ("queries", 8)]);
    for (lang, m) in &report.per_language {
        let _ = writeln!(
            out,
            "{:>8}  {:>8.4}  {:>8.4}  {:>8}",
            lang.as_str(),
            m.ndcg_at_k,
            m.recall_at_k,
            m.n_queries
        );
    }
    let _ = writeln!(
        out,
        "{:>8}  {:>8.4}  {:>8.4}  {:>8}",
        "macro", report.macro_avg.ndcg_at_k, report.macro_avg.recall_at_k, ""
    );
    out
}

pub fn render_distractor_table(reports: &[DistractorReport], k: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "distractor languages after ground-truth removal (top {k})");
    for r in reports {
        let _ = writeln!(
            out,
            "query language {} ({} queries): total {:.3}, ground truth retrieved {:.3}",
            r.query_lang.as_str(),
            r.n_queries,
            r.total_distractors,
            r.gap_to_cutoff
        );
        table_header(&mut out, &[("retrieved", 10), ("mean count", 10)]);
        for (lang, count) in &r.counts {
            let _ = writeln!(out, "{:>10}  {:>10.3}", lang.as_str(), count);
        }
    }
    out
}

pub fn render_sweep_table(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "threshold sweep (strategy {}, cutoff {})",
        report.strategy, report.cutoff
    );
    table_header(
        &mut out,
        &[("tau", 10), ("macro ndcg", 10), ("macro recall", 12), ("mean |F|", 10)],
    );
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:>10.6}  {:>10.4}  {:>12.4}  {:>10.1}",
            row.tau, row.macro_ndcg, row.macro_recall, row.mean_frequent_units
        );
    }
    out
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "masking-strategy ablation");
    table_header(&mut out, &[("strategy", 24), ("macro ndcg", 10), ("macro recall", 12)]);
    for row in rows {
        let _ = writeln!(
            out,
            "{:>24}  {:>10.4}  {:>12.4}",
            row.strategy, row.macro_ndcg, row.macro_recall
        );
    }
    out
}
