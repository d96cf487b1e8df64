//! Command-line pipeline driver: one binary, ten subcommands, reproducible
//! outputs. Flag precedence is CLI flag > config file > built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::atlas::{
    activation_frequencies, atlas_summary, build_atlas, load_atlas, load_table, mask_set,
    save_atlas, save_table, LanguageId, MaskStrategy, TableFile,
};
use crate::data::format::{manifest_path, read_embeddings, sha256_hex_file, write_embeddings};
use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
use crate::data::{EmbeddingSet, Manifest, RowMeta, TransformStamp};
use crate::editor::{
    abtt_batch, control_batch, default_abtt_components, edit_batch, fit_abtt, inverse_mask_batch,
    EditBatch, EditPlan, TimingReport, ZeroVectorPolicy,
};
use crate::eval::{
    distractor_analysis, evaluate_run, render_distractor_table, render_metrics_table,
    render_sweep_table, tau_sweep, Benchmark, MetricsReport,
};
use crate::numerics::{l2_norm, DenseMatrix, SeededRng};
use crate::retrieval::{
    build_pool, build_query_set, read_run, run_search, search_batch, write_run,
    write_run_manifest, RunManifest, DEFAULT_CUTOFF,
};
use crate::sae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::sae::train::train_with_validation;
use crate::sae::{eval_stats, SaeError, SaeModel, TrainConfig};

#[derive(Parser)]
#[command(name = "langsae", version, about = "Language-unit editing pipeline for embeddings")]
pub struct Cli {
    /// Worker threads; falls back to LANGSAE_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML config file with [subcommand] sections; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual benchmark (docs + queries).
    Gen(GenArgs),
    /// Train a sparse autoencoder on an embedding file.
    Train(TrainArgs),
    /// Measure per-language activation frequencies of a checkpoint.
    Stats(StatsArgs),
    /// Threshold a frequency measurement into a feature atlas.
    Atlas(AtlasArgs),
    /// Transform an embedding file (edit, control, inverse mask, or ABTT).
    Edit(EditArgs),
    /// Exact cosine retrieval of queries against a document pool.
    Retrieve(RetrieveArgs),
    /// Score a retrieval run (nDCG / recall, macro averages).
    Eval(EvalArgs),
    /// Distractor-language analysis after ground-truth removal.
    Diagnose(DiagnoseArgs),
    /// Threshold sweep: atlas -> edit -> retrieve -> evaluate per tau.
    Sweep(SweepArgs),
    /// Edit-vs-reconstruction throughput benchmark.
    Bench(BenchArgs),
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("LANGSAE_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(args) => cmd_gen(args, &cfg),
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Stats(args) => cmd_stats(args),
        Command::Atlas(args) => cmd_atlas(args, &cfg),
        Command::Edit(args) => cmd_edit(args, &cfg),
        Command::Retrieve(args) => cmd_retrieve(args, &cfg),
        Command::Eval(args) => cmd_eval(args, &cfg),
        Command::Diagnose(args) => cmd_diagnose(args, &cfg),
        Command::Sweep(args) => cmd_sweep(args, &cfg),
        Command::Bench(args) => cmd_bench(args, &cfg),
    }
}

struct FileConfig(Option<toml::Table>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(None)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let table: toml::Table = text
                    .parse()
                    .with_context(|| format!("parsing config {}", p.display()))?;
                Ok(Self(Some(table)))
            }
        }
    }

    fn get<T: DeserializeOwned>(&self, section: &str, key: &str) -> Result<Option<T>> {
        let Some(table) = &self.0 else { return Ok(None) };
        let Some(value) = table.get(section).and_then(|s| s.get(key)) else {
            return Ok(None);
        };
        let parsed = T::deserialize(value.clone())
            .with_context(|| format!("config key [{section}] {key}"))?;
        Ok(Some(parsed))
    }
}

fn resolve<T: DeserializeOwned>(
    flag: Option<T>,
    cfg: &FileConfig,
    section: &str,
    key: &str,
    default: T,
) -> Result<T> {
    Ok(match flag {
        Some(v) => v,
        None => cfg.get(section, key)?.unwrap_or(default),
    })
}

fn load_set(path: &Path) -> Result<EmbeddingSet> {
    read_embeddings(path).with_context(|| format!("reading embeddings {}", path.display()))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex_file(path)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen

#[derive(Args)]
struct GenArgs {
    /// Embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    languages: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    docs_per_group: Option<usize>,
    /// Language-direction strength alpha.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Per-vector noise strength sigma.
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving docs.emb and queries.emb (plus manifests).
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_gen(args: GenArgs, cfg: &FileConfig) -> Result<()> {
    let spec = SyntheticSpec {
        d: resolve(args.d, cfg, "gen", "d", 64)?,
        n_languages: resolve(args.languages, cfg, "gen", "languages", 4)?,
        n_groups: resolve(args.groups, cfg, "gen", "groups", 50)?,
        docs_per_group_per_lang: resolve(args.docs_per_group, cfg, "gen", "docs_per_group", 2)?,
        language_strength: resolve(args.alpha, cfg, "gen", "alpha", 2.0)?,
        semantic_noise: resolve(args.sigma, cfg, "gen", "sigma", 0.5)?,
        seed: resolve(args.seed, cfg, "gen", "seed", 0)?,
    };
    if spec.language_strength < 0.0 {
        bail!("--alpha must be >= 0 (got {})", spec.language_strength);
    }
    if spec.semantic_noise < 0.0 {
        bail!("--sigma must be >= 0 (got {})", spec.semantic_noise);
    }
    let out = generate_synthetic(&spec)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let docs_path = args.out_dir.join("docs.emb");
    let queries_path = args.out_dir.join("queries.emb");
    write_embeddings(&docs_path, &out.docs)?;
    write_embeddings(&queries_path, &out.queries)?;
    let summary = json!({
        "spec": spec,
        "docs": {
            "path": docs_path,
            "rows": out.docs.len(),
            "dim": out.docs.dim(),
            "sha256": hash_file(&docs_path)?,
            "languages": out.docs.language_counts(),
        },
        "queries": {
            "path": queries_path,
            "rows": out.queries.len(),
            "sha256": hash_file(&queries_path)?,
        },
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Training embedding file.
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out embedding file for per-epoch validation stats.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Latent width as a multiple of the input dimension.
    #[arg(long)]
    expansion: Option<usize>,
    /// Latent width override (takes precedence over --expansion).
    #[arg(long)]
    m: Option<usize>,
    /// Active units per example.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    aux_coefficient: Option<f64>,
    #[arg(long)]
    usage_target: Option<f64>,
    #[arg(long)]
    usage_temperature: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Stats JSON path (default: <out>.stats.json).
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs, cfg: &FileConfig) -> Result<()> {
    let data = load_set(&args.data)?;
    let val = args.val.as_deref().map(load_set).transpose()?;
    let d = data.dim();
    let expansion = resolve(args.expansion, cfg, "train", "expansion", 256)?;
    let m = match args.m {
        Some(m) => m,
        None => cfg.get::<usize>("train", "m")?.unwrap_or(expansion * d),
    };
    let k = resolve(args.k, cfg, "train", "k", 4096)?;
    let train_cfg = TrainConfig {
        learning_rate: resolve(args.lr, cfg, "train", "lr", 5e-4)?,
        aux_coefficient: resolve(args.aux_coefficient, cfg, "train", "aux_coefficient", 0.1)?,
        usage_target: resolve(args.usage_target, cfg, "train", "usage_target", 0.02)?,
        sigmoid_temperature: resolve(
            args.usage_temperature,
            cfg,
            "train",
            "usage_temperature",
            0.05,
        )?,
        batch_size: resolve(args.batch_size, cfg, "train", "batch_size", 1024)?,
        epochs: resolve(args.epochs, cfg, "train", "epochs", 1)?,
        seed: resolve(args.seed, cfg, "train", "seed", 0)?,
        ..TrainConfig::default()
    };

    let outcome = match train_with_validation(
        &data.matrix,
        val.as_ref().map(|v| &v.matrix),
        (m, k),
        &train_cfg,
    ) {
        Ok(outcome) => outcome,
        Err(SaeError::NonFiniteLoss { step, last_good }) => {
            // Keep what worked: the last finite model is still usable.
            let stats = eval_stats(&last_good.model, &data.matrix, &train_cfg)?;
            save_checkpoint(&last_good.model, &train_cfg, &stats, &args.out)?;
            bail!(
                "loss became non-finite at step {step}; last good checkpoint written to {}",
                args.out.display()
            );
        }
        Err(e) => return Err(e.into()),
    };

    let final_stats = eval_stats(&outcome.model, &data.matrix, &train_cfg)?;
    save_checkpoint(&outcome.model, &train_cfg, &final_stats, &args.out)?;
    let stats_path = args
        .stats_out
        .unwrap_or_else(|| PathBuf::from(format!("{}.stats.json", args.out.display())));
    let stats_doc = json!({
        "config": train_cfg,
        "arch": {"d": d, "m": m, "k": k},
        "data": {"path": args.data, "sha256": hash_file(&args.data)?},
        "val": match &args.val {
            Some(p) => json!({"path": p, "sha256": hash_file(p)?}),
            None => serde_json::Value::Null,
        },
        "final": final_stats,
        "history": outcome.history,
    });
    write_json(&stats_path, &stats_doc)?;
    println!(
        "trained d={d} m={m} k={k}: fvu {:.6}, mean_l0 {:.2}, dead_feature_fraction {:.4}",
        final_stats.fvu, final_stats.mean_l0, final_stats.dead_feature_fraction
    );
    println!("checkpoint: {}", args.out.display());
    println!("stats: {}", stats_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// stats

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled probe embedding file.
    #[arg(long)]
    probe: PathBuf,
    /// Frequency-table output path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let ckpt = load_model(&args.checkpoint)?;
    let probe = load_set(&args.probe)?;
    let table = activation_frequencies(&ckpt.model, &probe)?;
    let file = TableFile {
        checkpoint_sha256: Some(hash_file(&args.checkpoint)?),
        probe_manifest_sha256: Some(hash_file(&manifest_path(&args.probe))?),
        table,
    };
    save_table(&args.out, &file)?;
    let model_stats = eval_stats(&ckpt.model, &probe.matrix, &ckpt.config)?;
    let summary = json!({
        "out": args.out,
        "languages": file.table.languages,
        "probe_counts": file.table.probe_counts,
        "model_stats_on_probe": model_stats,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// atlas

#[derive(Args)]
struct AtlasArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    /// Activation-frequency threshold.
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_atlas(args: AtlasArgs, cfg: &FileConfig) -> Result<()> {
    let tau = resolve(args.tau, cfg, "atlas", "tau", 0.999)?;
    let ckpt = load_model(&args.checkpoint)?;
    let probe = load_set(&args.probe)?;
    let table = activation_frequencies(&ckpt.model, &probe)?;
    for (lang, count, required) in table.undersampled_languages(tau) {
        eprintln!(
            "warning: language {lang} has {count} probes; stable estimates at tau={tau} \
             want >= {required:.0}"
        );
    }
    let mut atlas = build_atlas(&table, tau)?;
    atlas.checkpoint_sha256 = Some(hash_file(&args.checkpoint)?);
    atlas.probe_manifest_sha256 = Some(hash_file(&manifest_path(&args.probe))?);
    save_atlas(&args.out, &atlas)?;
    let summary = atlas_summary(&atlas);
    if summary.per_language.values().all(|s| s.frequent == 0) {
        eprintln!("warning: atlas is empty at tau={tau}; editing will be a no-op");
    }
    println!("{}", serde_json::to_string_pretty(&json!({
        "out": args.out,
        "summary": summary,
    }))?);
    Ok(())
}

// ---------------------------------------------------------------------------
// edit

#[derive(Clone, Copy, PartialEq, Eq)]
enum EditMode {
    Edit,
    Control,
    Inverse,
    Abtt,
}

impl std::str::FromStr for EditMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "edit" => Ok(Self::Edit),
            "control" => Ok(Self::Control),
            "inverse" => Ok(Self::Inverse),
            "abtt" => Ok(Self::Abtt),
            other => Err(format!("unknown mode {other:?}; expected edit, control, inverse, or abtt")),
        }
    }
}

#[derive(Args)]
struct EditArgs {
    /// Transformation to apply.
    #[arg(long, default_value = "edit")]
    mode: EditMode,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<MaskStrategy>,
    #[arg(long)]
    zero_vector_policy: Option<ZeroVectorPolicy>,
    /// Embedding file to transform.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Principal components removed in abtt mode (default max(1, d/100)).
    #[arg(long)]
    abtt_components: Option<usize>,
    /// File the abtt transform is fitted on (default: the input itself).
    #[arg(long)]
    abtt_fit: Option<PathBuf>,
}

fn cmd_edit(args: EditArgs, cfg: &FileConfig) -> Result<()> {
    let input = load_set(&args.input)?;
    let batch = match args.mode {
        EditMode::Abtt => {
            let fit_path = args.abtt_fit.clone().unwrap_or_else(|| args.input.clone());
            let fit_set =
                if fit_path == args.input { input.clone() } else { load_set(&fit_path)? };
            let d_pc = match args.abtt_components {
                Some(n) => n,
                None => cfg
                    .get::<usize>("edit", "abtt_components")?
                    .unwrap_or_else(|| default_abtt_components(input.dim())),
            };
            let params = fit_abtt(&fit_set.matrix, d_pc)?;
            let stamp = TransformStamp {
                method: "abtt".to_string(),
                checkpoint_sha256: None,
                atlas_sha256: Some(hash_file(&fit_path)?),
                strategy: Some(format!("d_pc={d_pc}")),
            };
            abtt_batch(&params, &input, stamp)?
        }
        EditMode::Control => {
            let ckpt_path =
                args.checkpoint.as_deref().context("--checkpoint required for control mode")?;
            let ckpt = load_model(ckpt_path)?;
            let stamp = TransformStamp {
                method: "reconstruction-control".to_string(),
                checkpoint_sha256: Some(hash_file(ckpt_path)?),
                atlas_sha256: None,
                strategy: None,
            };
            control_batch(&ckpt.model, &input, stamp)?
        }
        EditMode::Edit | EditMode::Inverse => {
            let ckpt_path =
                args.checkpoint.as_deref().context("--checkpoint required for edit mode")?;
            let atlas_path = args.atlas.as_deref().context("--atlas required for edit mode")?;
            let ckpt = load_model(ckpt_path)?;
            let atlas = load_atlas(atlas_path)?;
            let strategy = match args.strategy {
                Some(s) => s,
                None => cfg
                    .get::<String>("edit", "strategy")?
                    .map(|s| s.parse::<MaskStrategy>().map_err(anyhow::Error::msg))
                    .transpose()?
                    .unwrap_or(MaskStrategy::UniquePlusOverlapping),
            };
            let policy = args.zero_vector_policy.unwrap_or_default();
            let plan = EditPlan { atlas, strategy, zero_vector_policy: policy };
            let method =
                if args.mode == EditMode::Edit { "sae-edit" } else { "inverse-mask" };
            let stamp = TransformStamp {
                method: method.to_string(),
                checkpoint_sha256: Some(hash_file(ckpt_path)?),
                atlas_sha256: Some(hash_file(atlas_path)?),
                strategy: Some(strategy.as_str().to_string()),
            };
            if args.mode == EditMode::Edit {
                edit_batch(&ckpt.model, &plan, &input, stamp)?
            } else {
                inverse_mask_batch(&ckpt.model, &plan, &input, stamp)?
            }
        }
    };
    finish_edit(batch, &args.out)
}

fn finish_edit(batch: EditBatch, out: &Path) -> Result<()> {
    write_embeddings(out, &batch.set)?;
    let fallbacks: Vec<&str> = batch
        .fell_back
        .iter()
        .zip(&batch.set.manifest.rows)
        .filter(|(flag, _)| **flag)
        .map(|(_, row)| row.id.as_str())
        .collect();
    if !fallbacks.is_empty() {
        eprintln!(
            "warning: {} rows collapsed to zero and fell back to the reconstruction control: {}",
            fallbacks.len(),
            fallbacks.join(", ")
        );
    }
    println!("{}", serde_json::to_string_pretty(&json!({
        "out": out,
        "timing": batch.timing,
        "fallback_rows": fallbacks.len(),
    }))?);
    Ok(())
}

// ---------------------------------------------------------------------------
// retrieve

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    cutoff: Option<usize>,
    /// Run output path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Skip the transform-stamp equality check between docs and queries.
    #[arg(long)]
    unsafe_allow_mixed_transforms: bool,
}

fn cmd_retrieve(args: RetrieveArgs, cfg: &FileConfig) -> Result<()> {
    let cutoff = resolve(args.cutoff, cfg, "retrieve", "cutoff", DEFAULT_CUTOFF)?;
    let docs = load_set(&args.docs)?;
    let queries = load_set(&args.queries)?;
    let pool = build_pool(&docs)?;
    let qset = build_query_set(&queries, &pool)?;
    let results = if args.unsafe_allow_mixed_transforms {
        eprintln!("warning: mixed-transform check disabled; results compare unlike vectors");
        search_batch(&pool, &qset, cutoff)?
    } else {
        run_search(&pool, &qset, cutoff)?
    };
    write_run(&args.out, &results)?;
    let manifest = RunManifest {
        pool_sha256: Some(hash_file(&args.docs)?),
        transform: pool.transform().clone(),
        cutoff,
        n_queries: results.len(),
        method: "exact".to_string(),
    };
    write_run_manifest(&manifest_path(&args.out), &manifest)?;
    println!("{}", serde_json::to_string_pretty(&json!({
        "out": args.out,
        "manifest": manifest,
    }))?);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Optional second run to compare against (e.g. an unedited baseline).
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn eval_one(run: &Path, docs: &Path, queries: &Path, k: usize) -> Result<MetricsReport> {
    let docs = load_set(docs)?;
    let queries = load_set(queries)?;
    let pool = build_pool(&docs)?;
    let qset = build_query_set(&queries, &pool)?;
    let results = read_run(run)?;
    Ok(evaluate_run(&results, &qset, &pool, k)?)
}

fn cmd_eval(args: EvalArgs, cfg: &FileConfig) -> Result<()> {
    let k = resolve(args.k, cfg, "eval", "k", DEFAULT_CUTOFF)?;
    let report = eval_one(&args.run, &args.docs, &args.queries, k)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", render_metrics_table(&report));
    let baseline = match &args.compare {
        Some(run) => Some(eval_one(run, &args.docs, &args.queries, k)?),
        None => None,
    };
    let relative = baseline.as_ref().map(|b| {
        json!({
            "macro_ndcg": relative_change(report.macro_avg.ndcg_at_k, b.macro_avg.ndcg_at_k),
            "macro_recall": relative_change(report.macro_avg.recall_at_k, b.macro_avg.recall_at_k),
        })
    });
    if let (Some(b), Some(rel)) = (&baseline, &relative) {
        print!("baseline:\n{}", render_metrics_table(b));
        println!("relative change vs baseline: {rel}");
    }
    if let Some(out) = &args.out {
        let doc = json!({
            "config": {
                "run": args.run,
                "run_sha256": hash_file(&args.run)?,
                "docs": args.docs,
                "queries": args.queries,
                "k": k,
                "compare": args.compare,
            },
            "metrics": report,
            "baseline": baseline,
            "relative_change": relative,
        });
        write_json(out, &doc)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn relative_change(new: f64, old: f64) -> f64 {
    if old == 0.0 {
        if new == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (new - old) / old
    }
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_diagnose(args: DiagnoseArgs, cfg: &FileConfig) -> Result<()> {
    let k = resolve(args.k, cfg, "diagnose", "k", DEFAULT_CUTOFF)?;
    let docs = load_set(&args.docs)?;
    let queries = load_set(&args.queries)?;
    let pool = build_pool(&docs)?;
    let qset = build_query_set(&queries, &pool)?;
    let results = read_run(&args.run)?;
    let reports = distractor_analysis(&results, &qset, &pool, k)?;
    print!("{}", render_distractor_table(&reports, k));
    if let Some(out) = &args.out {
        let doc = json!({
            "config": {
                "run": args.run,
                "run_sha256": hash_file(&args.run)?,
                "docs": args.docs,
                "queries": args.queries,
                "k": k,
            },
            "reports": reports,
        });
        write_json(out, &doc)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frequency table produced by `stats`.
    #[arg(long)]
    table: PathBuf,
    /// Unedited benchmark sides.
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Comma-separated strictly decreasing thresholds.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long)]
    strategy: Option<MaskStrategy>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs, cfg: &FileConfig) -> Result<()> {
    let taus: Vec<f64> = match &args.taus {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad tau {t:?}")))
            .collect::<Result<_>>()?,
        None => cfg
            .get::<Vec<f64>>("sweep", "taus")?
            .unwrap_or_else(|| vec![1.0, 0.999, 0.99, 0.9, 0.5]),
    };
    let strategy = match args.strategy {
        Some(s) => s,
        None => cfg
            .get::<String>("sweep", "strategy")?
            .map(|s| s.parse::<MaskStrategy>().map_err(anyhow::Error::msg))
            .transpose()?
            .unwrap_or(MaskStrategy::UniquePlusOverlapping),
    };
    let cutoff = resolve(args.cutoff, cfg, "sweep", "cutoff", DEFAULT_CUTOFF)?;
    let ckpt = load_model(&args.checkpoint)?;
    let table_file = load_table(&args.table)?;
    let bench = Benchmark {
        docs: load_set(&args.docs)?,
        queries: load_set(&args.queries)?,
        cutoff,
    };
    let report = tau_sweep(&ckpt.model, &table_file.table, &bench, &taus, strategy)?;
    print!("{}", render_sweep_table(&report));
    if let Some(out) = &args.out {
        let doc = json!({
            "config": {
                "checkpoint": args.checkpoint,
                "checkpoint_sha256": hash_file(&args.checkpoint)?,
                "table": args.table,
                "docs": args.docs,
                "queries": args.queries,
                "taus": taus,
                "strategy": strategy,
                "cutoff": cutoff,
            },
            "report": report,
        });
        write_json(out, &doc)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    d: Option<usize>,
    /// Number of vectors to transform.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Random unit rows labeled with one language, chunked so the benchmark
/// never holds the full dataset in memory.
fn bench_chunk(rng: &mut SeededRng, start: usize, rows: usize, d: usize) -> EmbeddingSet {
    let mut data = Vec::with_capacity(rows * d);
    let mut meta = Vec::with_capacity(rows);
    for i in 0..rows {
        let v = rng.normal_vec(d);
        let norm = l2_norm(&v);
        data.extend(v.iter().map(|x| x / norm));
        meta.push(RowMeta {
            id: format!("b{:07}", start + i),
            lang: "xx".to_string(),
            group: Some(format!("g{:07}", start + i)),
        });
    }
    let matrix = DenseMatrix::new(rows, d, data).expect("bench chunk shape");
    EmbeddingSet::new(
        matrix,
        Manifest { rows: meta, transform: None, provenance: None },
    )
    .expect("bench chunk rows")
}

fn combine_timing(method: &str, total_s: f64, n: usize) -> TimingReport {
    TimingReport {
        method: method.to_string(),
        total_s,
        ms_per_sample: total_s * 1e3 / n.max(1) as f64,
        samples_per_s: if total_s > 0.0 { n as f64 / total_s } else { f64::INFINITY },
        n,
    }
}

fn cmd_bench(args: BenchArgs, cfg: &FileConfig) -> Result<()> {
    let d = resolve(args.d, cfg, "bench", "d", 1024)?;
    let n = resolve(args.n, cfg, "bench", "n", 100_000)?;
    let m = resolve(args.m, cfg, "bench", "m", 1024)?;
    let k = resolve(args.k, cfg, "bench", "k", 32)?;
    let seed = resolve(args.seed, cfg, "bench", "seed", 0)?;
    const CHUNK: usize = 8192;

    let mut rng = SeededRng::new(seed);
    let model = SaeModel::init(d, m, k, &mut rng)?;

    // Atlas measured on a probe slice so the edit path runs a realistic,
    // nonempty mask; one language makes every frequent unit unique.
    let probe = bench_chunk(&mut rng, 0, CHUNK.min(n.max(1)), d);
    let table = activation_frequencies(&model, &probe)?;
    let atlas = build_atlas(&table, 0.01)?;
    let mask_len = mask_set(&atlas, &LanguageId::new("xx")?, MaskStrategy::UniqueOnly)?.len();
    let plan = EditPlan::new(atlas, MaskStrategy::UniqueOnly);

    let edit_stamp = TransformStamp {
        method: "sae-edit".to_string(),
        checkpoint_sha256: None,
        atlas_sha256: None,
        strategy: Some("unique-only".to_string()),
    };
    let control_stamp = TransformStamp {
        method: "reconstruction-control".to_string(),
        checkpoint_sha256: None,
        atlas_sha256: None,
        strategy: None,
    };

    let (mut edit_s, mut control_s) = (0.0, 0.0);
    let mut done = 0;
    while done < n {
        let rows = CHUNK.min(n - done);
        let chunk = bench_chunk(&mut rng, done, rows, d);
        edit_s += edit_batch(&model, &plan, &chunk, edit_stamp.clone())?.timing.total_s;
        control_s += control_batch(&model, &chunk, control_stamp.clone())?.timing.total_s;
        done += rows;
    }
    let reports = vec![
        combine_timing("sae-edit", edit_s, n),
        combine_timing("reconstruction-control", control_s, n),
    ];
    let doc = json!({
        "config": {"d": d, "n": n, "m": m, "k": k, "seed": seed, "mask_units": mask_len},
        "reports": reports,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    if let Some(out) = &args.out {
        write_json(out, &doc)?;
    }
    Ok(())
}
