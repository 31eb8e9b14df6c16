//! Command-line front end: individual pipeline stages over dataset
//! directories, and `run` for the full experiment grid.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 provider error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esci_eval::catalog::{read_dataset, write_dataset, write_jsonl, Catalog, Dataset};
use esci_eval::dataset_ops::{
    compute_label_stats, filter_by_popularity, pad_with_irrelevant_from, render_label_stats_table, PadConfig,
};
use esci_eval::enrichment::{
    compose_document, embed_images_cached, embed_texts_cached, enrich_catalog, preprocess_queries, CompositionMode,
    EnrichError,
};
use esci_eval::metrics::{ndcg, Ranking, RunScores};
use esci_eval::runner::{
    compare_similarity_backends, emit_report, load_dataset, prepare, ranker_seed, render_mean_table,
    render_range_table, run_experiment, with_jobs, Approach, DataPaths, EvalSplit, ExperimentConfig,
    ExperimentReport, RunContext, RunnerError,
};

type Result<T> = std::result::Result<T, RunnerError>;

#[derive(Parser)]
#[command(name = "esci-eval", version, about = "Product-search ranking evaluation over ESCI-style judgments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker count bound; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Persistent enrichment/embedding cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load raw products/queries/judgments (CSV, TSV or JSONL) into a dataset directory.
    Ingest {
        #[arg(long)]
        products: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        /// Fraction of queries assigned to train when judgments carry no split.
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Keep products judged at least N times; drop emptied queries.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        min_occurrences: Option<usize>,
    },
    /// Pad every query with sampled irrelevant products.
    Pad {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pad_size: usize,
        /// Sample padding from this dataset's catalog instead of the input's.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Attach generated captions and/or tags to products with images.
    Enrich {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        captions: bool,
        #[arg(long)]
        tags: bool,
        /// Named-prompt JSONL file.
        #[arg(long)]
        prompt_set: Option<PathBuf>,
        /// Tag vocabulary, one entry per line.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Rewrite queries into keyword lists.
    PreprocessQueries {
        #[arg(long)]
        input: PathBuf,
    },
    /// Embed documents and queries; vectors are written and cached.
    Embed {
        #[arg(long)]
        input: PathBuf,
        /// Document composition: text, img_gen, text_plus_img_gen or img_direct.
        #[arg(long, default_value = "text")]
        mode: CompositionMode,
    },
    /// Rank every evaluation query of a (padded) dataset with one approach.
    Rank {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        approach: Approach,
        /// Rank with preprocessed query text.
        #[arg(long)]
        preprocessed: bool,
    },
    /// Score a rankings file against a dataset's judgments.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rankings: PathBuf,
    },
    /// Re-emit tables and plot data from a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the full experiment grid from the configuration.
    Run {
        /// Run the bi-encoder vs cross-encoder comparison instead of the configured approaches.
        #[arg(long)]
        compare_backends: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Configuration from `--config` (or defaults) with global overrides applied.
fn resolve_config(global: &Global, require_file: bool) -> Result<ExperimentConfig> {
    let mut config = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if require_file => return Err(RunnerError::Config("--config is required".into())),
        None => ExperimentConfig::new(DataPaths::default()),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(jobs) = global.jobs {
        config.jobs = Some(jobs);
    }
    if let Some(dir) = &global.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    if let Some(dir) = &global.out_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn output_error(path: &Path, source: std::io::Error) -> RunnerError {
    RunnerError::Output {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| output_error(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| output_error(path, e))
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    let (dataset, report, warnings) = read_dataset(dir)?;
    for w in warnings {
        log::warn!("{w}");
    }
    if !report.empty_queries.is_empty() {
        log::warn!("dropped {} queries without judgments", report.empty_queries.len());
    }
    Ok(dataset)
}

/// Print and save label statistics for one dataset.
fn emit_stats(dataset: &Dataset, column: usize, out: &Path) -> Result<()> {
    let stats = compute_label_stats(dataset)?;
    print!("{}", render_label_stats_table(&[(column, stats.clone())]));
    let record = serde_json::to_string_pretty(&stats).expect("stats serialize");
    println!("{record}");
    write_text(&out.join("label_stats.json"), &record)
}

fn execute(cli: Cli) -> Result<()> {
    let global = &cli.global;
    let require_file = matches!(cli.command, Command::Run { .. });
    let config = resolve_config(global, require_file)?;
    let out = config.output_dir.clone();
    with_jobs(config.jobs, || match cli.command {
        Command::Ingest {
            products,
            queries,
            judgments,
            train_fraction,
        } => {
            let dataset = load_dataset(&DataPaths {
                products,
                queries,
                judgments,
                train_fraction,
            })?;
            write_dataset(&out, &dataset)?;
            log::info!(
                "ingested {} products, {} queries, {} judgments into {}",
                dataset.catalog().len(),
                dataset.queries().len(),
                dataset.judgments().len(),
                out.display()
            );
            emit_stats(&dataset, 0, &out)
        }
        Command::Filter { input, min_occurrences } => {
            let dataset = open_dataset(&input)?;
            let filtered = filter_by_popularity(&dataset, min_occurrences.unwrap_or(config.min_occurrences))?;
            write_dataset(&out, &filtered)?;
            emit_stats(&filtered, 0, &out)
        }
        Command::Pad { input, pad_size, pool } => {
            let dataset = open_dataset(&input)?;
            let pool: Option<Catalog> = match pool {
                Some(dir) => Some(open_dataset(&dir)?.into_parts().0),
                None => None,
            };
            let padded = pad_with_irrelevant_from(
                &dataset,
                PadConfig {
                    pad_size,
                    seed: config.seed,
                },
                pool.as_ref(),
                config.exec_mode(),
            );
            write_dataset(&out, &padded.dataset)?;
            write_jsonl(&out.join("exhaustion_warnings.jsonl"), &padded.warnings)?;
            emit_stats(&padded.dataset, pad_size, &out)
        }
        Command::Enrich {
            input,
            captions,
            tags,
            prompt_set,
            vocabulary,
        } => {
            let mut config = config.clone();
            if prompt_set.is_some() {
                config.enrichment.prompts = prompt_set;
            }
            if vocabulary.is_some() {
                config.enrichment.vocabulary = vocabulary;
            }
            let (captions, tags) = if captions || tags { (captions, tags) } else { (true, true) };
            let ctx = RunContext::from_config(&config)?;
            let dataset = open_dataset(&input)?;
            let enrich_cfg = esci_eval::enrichment::EnrichConfig {
                vocabulary: ctx.vocabulary.clone(),
                top_k: config.enrichment.top_k_tags,
                max_in_flight: config.enrichment.max_in_flight,
                failure_threshold: config.enrichment.failure_threshold,
            };
            let outcome = enrich_catalog(
                dataset.catalog(),
                captions.then_some(ctx.providers.caption.as_ref()),
                tags.then_some(ctx.providers.tag.as_ref()),
                &ctx.prompts,
                &ctx.cache,
                &enrich_cfg,
            )?;
            log::info!(
                "enriched {} products ({} skipped without image, {} failures, {} provider calls)",
                outcome.catalog.len() - outcome.skipped.len(),
                outcome.skipped.len(),
                outcome.failures.len(),
                outcome.provider_calls
            );
            let enriched = dataset.with_catalog(outcome.catalog)?;
            write_dataset(&out, &enriched)?;
            write_jsonl(&out.join("enrich_failures.jsonl"), &outcome.failures)?;
            Ok(())
        }
        Command::PreprocessQueries { input } => {
            let ctx = RunContext::from_config(&config)?;
            let dataset = open_dataset(&input)?;
            let enrich_cfg = esci_eval::enrichment::EnrichConfig {
                max_in_flight: config.enrichment.max_in_flight,
                failure_threshold: config.enrichment.failure_threshold,
                ..Default::default()
            };
            let outcome = preprocess_queries(
                dataset.queries(),
                ctx.providers.preprocess.as_ref(),
                &ctx.prompts,
                &ctx.cache,
                &enrich_cfg,
            )?;
            log::info!(
                "preprocessed {} queries ({} fallbacks)",
                outcome.queries.len(),
                outcome.fallback_count()
            );
            create_dir(&out)?;
            write_jsonl(&out.join("processed_queries.jsonl"), outcome.queries.values())?;
            write_jsonl(&out.join("preprocess_failures.jsonl"), &outcome.failures)?;
            Ok(())
        }
        Command::Embed { input, mode } => {
            let ctx = RunContext::from_config(&config)?;
            let dataset = open_dataset(&input)?;
            embed_stage(&config, &ctx, &dataset, mode, &out)
        }
        Command::Rank {
            input,
            approach,
            preprocessed,
        } => {
            let mut config = config.clone();
            config.approaches = vec![approach];
            config.preprocessing = vec![preprocessed];
            config.validate()?;
            let ctx = RunContext::from_config(&config)?;
            let dataset = open_dataset(&input)?;
            let pool = dataset.catalog().clone();
            let prepared = prepare(&config, dataset, pool, &ctx)?;
            let data = &prepared.dataset;
            let queries: Vec<String> = data
                .queries()
                .iter()
                .map(|q| q.query_id.clone())
                .filter(|q| in_split(data, q, config.eval_split))
                .collect();
            if queries.is_empty() {
                return Err(RunnerError::NoEvalQueries(config.eval_split));
            }
            let seed = ranker_seed(&config, approach, 0, 0, 0);
            let rankings = config.exec_mode().try_map(&queries, |qid| {
                prepared
                    .rank(approach, data, qid, preprocessed, seed, &ctx)
                    .map_err(|source| RunnerError::Rank {
                        context: format!("{approach}, query {qid}"),
                        source,
                    })
            })?;
            create_dir(&out)?;
            write_jsonl(&out.join("rankings.jsonl"), &rankings)?;
            log::info!("ranked {} queries with {approach}", rankings.len());
            Ok(())
        }
        Command::Evaluate { input, rankings } => {
            let dataset = open_dataset(&input)?;
            let raw = std::fs::read_to_string(&rankings).map_err(|e| RunnerError::Report {
                path: rankings.clone(),
                message: e.to_string(),
            })?;
            let mut outcomes = Vec::new();
            for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let ranking: Ranking = serde_json::from_str(line).map_err(|e| RunnerError::Report {
                    path: rankings.clone(),
                    message: format!("line {}: {e}", i + 1),
                })?;
                let outcome = ndcg(&ranking, dataset.judgments(), &config.gain_scheme, config.k).map_err(|source| {
                    RunnerError::Metric {
                        context: format!("query {}", ranking.query_id),
                        source,
                    }
                })?;
                outcomes.push((ranking.query_id, outcome));
            }
            let scores: RunScores = outcomes.into_iter().collect();
            let summary = serde_json::json!({
                "mean_ndcg": scores.dataset_score(config.weighting),
                "scored_queries": scores.scored(),
                "skipped_queries": scores.skipped(),
                "gain_scheme": config.gain_scheme,
                "k": config.k,
                "weighting": config.weighting,
            });
            let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
            println!("{body}");
            create_dir(&out)?;
            write_text(&out.join("evaluation.json"), &body)
        }
        Command::Report { input } => {
            let report = ExperimentReport::load(&input)?;
            print_report(&report);
            emit_report(&report, &out).map(|_| ())
        }
        Command::Run { compare_backends } => {
            let report = if compare_backends {
                compare_similarity_backends(&config)?
            } else {
                run_experiment(&config)?
            };
            print_report(&report);
            let files = emit_report(&report, &out)?;
            log::info!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
    })?
}

fn in_split(dataset: &Dataset, query_id: &str, split: EvalSplit) -> bool {
    use esci_eval::catalog::Split;
    match split {
        EvalSplit::All => true,
        EvalSplit::Test => dataset.query_split(query_id) == Split::Test,
        EvalSplit::Train => dataset.query_split(query_id) == Split::Train,
    }
}

fn print_report(report: &ExperimentReport) {
    println!("{}", render_mean_table(report));
    println!("{}", render_range_table(report));
    for note in &report.notes {
        println!("{note}");
    }
}

#[derive(serde::Serialize)]
struct VectorRecord<'a> {
    kind: &'static str,
    id: &'a str,
    #[serde(flatten)]
    vector: &'a esci_eval::rankers::EmbeddingVector,
}

fn embed_stage(
    config: &ExperimentConfig,
    ctx: &RunContext,
    dataset: &Dataset,
    mode: CompositionMode,
    out: &Path,
) -> Result<()> {
    let batch = config.enrichment.embed_batch;
    let in_flight = config.enrichment.max_in_flight;
    let ids: Vec<&str> = dataset.catalog().ids().collect();
    let (provider, doc_vectors) = if mode == CompositionMode::ImgDirect {
        let refs = dataset
            .catalog()
            .iter()
            .map(|p| {
                p.image_ref.clone().ok_or_else(|| RunnerError::Unresolvable {
                    approach: Approach::ImgDirect,
                    reason: format!("product {} has no image_ref", p.product_id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let provider = ctx.providers.embed_image.as_ref();
        (provider, embed_images_cached(provider, &ctx.cache, &refs, in_flight)?)
    } else {
        let docs = dataset
            .catalog()
            .iter()
            .map(|p| {
                compose_document(p, mode, config.char_cap)?
                    .ok_or_else(|| EnrichError::MissingEnrichment {
                        product_id: p.product_id.clone(),
                        mode,
                    })
            })
            .collect::<std::result::Result<Vec<_>, EnrichError>>()?;
        let provider = ctx.providers.embed_text.as_ref();
        (provider, embed_texts_cached(provider, &ctx.cache, &docs, batch, in_flight)?)
    };
    let query_ids: Vec<&str> = dataset.queries().iter().map(|q| q.query_id.as_str()).collect();
    let query_texts: Vec<String> = dataset.queries().iter().map(|q| q.text.clone()).collect();
    let query_vectors = embed_texts_cached(provider, &ctx.cache, &query_texts, batch, in_flight)?;

    let records: Vec<VectorRecord> = ids
        .iter()
        .zip(&doc_vectors)
        .map(|(id, vector)| VectorRecord {
            kind: "product",
            id,
            vector,
        })
        .chain(query_ids.iter().zip(&query_vectors).map(|(id, vector)| VectorRecord {
            kind: "query",
            id,
            vector,
        }))
        .collect();
    create_dir(out)?;
    write_jsonl(&out.join(format!("embeddings_{}.jsonl", mode.as_str())), &records)?;
    log::info!("embedded {} products and {} queries", ids.len(), query_ids.len());
    Ok(())
}
