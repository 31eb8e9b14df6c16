//! Experiment orchestration: filter → pad → enrich → embed → rank →
//! evaluate over the grid (approach × pad size × preprocessing flag), with
//! several independent runs per cell.
//!
//! Padded datasets are built once per (pad size, run) and shared by every
//! approach, so rows of the grid always compare rankings of identical
//! candidate sets. Stochastic rankers draw from seeds derived as
//! `hash(base_seed, approach, pad_size, run, ordering)`.

mod config;
mod report;

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use crate::catalog::{
    load_judgments_with, load_products, load_queries, Catalog, CatalogError, Dataset, Format, ProcessedQuerySet,
    Split, SplitPolicy,
};
use crate::dataset_ops::{compute_label_stats, filter_by_popularity, pad_with_irrelevant_from, DatasetError, PadConfig};
use crate::enrichment::{
    embed_images_cached, embed_texts_cached, enrich_catalog, preprocess_queries, CacheKey, CompositionMode,
    EnrichConfig, EnrichError, EnrichmentCache, PromptSet, load_vocabulary,
};
use crate::hashing::{derive_seed, hash_parts};
use crate::metrics::{median, ndcg, summarize_scores, MetricError, QueryOutcome, Ranking, RunScores};
use crate::provider::{CancelToken, Capability, InFlightLimiter, Provider, ProviderError, ProviderIdentity};
use crate::rankers::{
    fit_popularity, rank_by_unit_similarity, rank_most_popular, rank_random, PopularityModel, RankError, UnitVector,
};

pub use config::{
    Approach, DataPaths, EnrichmentSettings, EvalSplit, ExperimentConfig, PadSource, ProviderSettings,
};
pub use report::{
    emit_report, render_mean_table, render_range_table, DatasetSizes, ExperimentReport, PadLabelStats, PadSeed,
    PlotPoint, PlotSeries, ReportCell, ReportProvenance, FULL_CORPUS_REFERENCE,
};

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("approach {approach}: input not resolvable: {reason}")]
    Unresolvable { approach: Approach, reason: String },
    #[error("no queries in the {0:?} evaluation split")]
    NoEvalQueries(EvalSplit),
    #[error(transparent)]
    Enrich(#[from] EnrichError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{context}: {source}")]
    Rank {
        context: String,
        #[source]
        source: RankError,
    },
    #[error("{context}: {source}")]
    Metric {
        context: String,
        #[source]
        source: MetricError,
    },
    #[error("report grid is empty")]
    EmptyGrid,
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report {path}: {message}")]
    Report { path: PathBuf, message: String },
}

impl RunnerError {
    /// Process exit status: 1 usage/config, 2 data, 3 provider.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::EmptyGrid | RunnerError::Output { .. } => 1,
            RunnerError::Provider(_) => 3,
            RunnerError::Enrich(e) => match e {
                EnrichError::Provider(_) | EnrichError::FailureRate { .. } => 3,
                EnrichError::PromptFile { .. } | EnrichError::UnknownMode(_) => 1,
                _ => 2,
            },
            RunnerError::Rank {
                source: RankError::Provider(_) | RankError::ScoreCount { .. },
                ..
            } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunnerError>;

/// Load the three record files named by `paths`, inferring each format
/// from its extension.
pub fn load_dataset(paths: &DataPaths) -> Result<Dataset> {
    let products = load_products(&paths.products, Format::from_path(&paths.products))?;
    let queries = load_queries(&paths.queries, Format::from_path(&paths.queries))?;
    let policy = SplitPolicy {
        train_fraction: paths.train_fraction,
    };
    let judgments = load_judgments_with(&paths.judgments, Format::from_path(&paths.judgments), &policy)?;
    for w in products.warnings.iter().chain(&queries.warnings).chain(&judgments.warnings) {
        log::warn!("{w}");
    }
    let (dataset, report) = Dataset::build(products.value, queries.value, judgments.value)?;
    if !report.empty_queries.is_empty() {
        log::warn!("dropped {} queries without judgments", report.empty_queries.len());
    }
    Ok(dataset)
}

/// One provider per capability.
#[derive(Clone)]
pub struct Providers {
    pub embed_text: Arc<dyn Provider>,
    pub embed_image: Arc<dyn Provider>,
    pub caption: Arc<dyn Provider>,
    pub tag: Arc<dyn Provider>,
    pub cross_score: Arc<dyn Provider>,
    pub preprocess: Arc<dyn Provider>,
}

impl Providers {
    pub fn from_settings(settings: &ProviderSettings, cancel: &CancelToken) -> Self {
        let global = Arc::new(InFlightLimiter::new(settings.max_in_flight));
        Providers {
            embed_text: settings.embed_text.build(&global, cancel),
            embed_image: settings.embed_image.build(&global, cancel),
            caption: settings.caption.build(&global, cancel),
            tag: settings.tag.build(&global, cancel),
            cross_score: settings.cross_score.build(&global, cancel),
            preprocess: settings.preprocess.build(&global, cancel),
        }
    }

    /// Every capability served by the same provider.
    pub fn uniform(provider: Arc<dyn Provider>) -> Self {
        Providers {
            embed_text: Arc::clone(&provider),
            embed_image: Arc::clone(&provider),
            caption: Arc::clone(&provider),
            tag: Arc::clone(&provider),
            cross_score: Arc::clone(&provider),
            preprocess: provider,
        }
    }

    pub fn get(&self, capability: Capability) -> &Arc<dyn Provider> {
        match capability {
            Capability::EmbedText => &self.embed_text,
            Capability::EmbedImage => &self.embed_image,
            Capability::Caption => &self.caption,
            Capability::Tag => &self.tag,
            Capability::CrossScore => &self.cross_score,
            Capability::Preprocess => &self.preprocess,
        }
    }
}

/// Providers, cache and prompt material shared by the stages of a run.
pub struct RunContext {
    pub providers: Providers,
    pub cache: EnrichmentCache,
    pub prompts: PromptSet,
    pub vocabulary: Vec<String>,
    pub cancel: CancelToken,
}

impl RunContext {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let cancel = CancelToken::new();
        let cache = match &config.cache_dir {
            Some(dir) => EnrichmentCache::open(dir).map_err(EnrichError::from)?,
            None => EnrichmentCache::in_memory(),
        };
        let prompts = match &config.enrichment.prompts {
            Some(p) => PromptSet::load(p)?,
            None => PromptSet::default(),
        };
        let vocabulary = match &config.enrichment.vocabulary {
            Some(p) => load_vocabulary(p)?,
            None => EnrichConfig::default().vocabulary,
        };
        if vocabulary.is_empty() {
            return Err(RunnerError::Config("tag vocabulary is empty".into()));
        }
        Ok(RunContext {
            providers: Providers::from_settings(&config.providers, &cancel),
            cache,
            prompts,
            vocabulary,
            cancel,
        })
    }

    /// Stub providers for every capability and an in-memory cache.
    pub fn stubs() -> Self {
        RunContext {
            providers: Providers::uniform(Arc::new(crate::provider::StubProvider::default())),
            cache: EnrichmentCache::in_memory(),
            prompts: PromptSet::default(),
            vocabulary: EnrichConfig::default().vocabulary,
            cancel: CancelToken::new(),
        }
    }

    fn enrich_config(&self, config: &ExperimentConfig) -> EnrichConfig {
        EnrichConfig {
            vocabulary: self.vocabulary.clone(),
            top_k: config.enrichment.top_k_tags,
            max_in_flight: config.enrichment.max_in_flight,
            failure_threshold: config.enrichment.failure_threshold,
        }
    }
}

/// Embedding space a query is projected into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Space {
    Text,
    Image,
}

/// Everything rankers need, computed once before any ranking starts.
pub struct Prepared {
    /// Filtered dataset with enriched products.
    pub dataset: Dataset,
    /// Catalog that padding samples from.
    pub pool: Catalog,
    pub processed: Option<ProcessedQuerySet>,
    pub enrichment_failures: usize,
    pub preprocess_fallbacks: usize,
    approaches: Vec<Approach>,
    similarity: CompositionMode,
    documents: BTreeMap<CompositionMode, BTreeMap<String, String>>,
    doc_vectors: BTreeMap<CompositionMode, BTreeMap<String, UnitVector>>,
    image_vectors: BTreeMap<String, UnitVector>,
    query_text: BTreeMap<bool, BTreeMap<String, String>>,
    query_vectors: BTreeMap<(Space, bool), BTreeMap<String, UnitVector>>,
    popularity: BTreeMap<Approach, PopularityModel>,
}

fn unresolvable(approach: Approach, reason: impl Into<String>) -> RunnerError {
    RunnerError::Unresolvable {
        approach,
        reason: reason.into(),
    }
}

fn normalize_all(ids: &[String], vectors: Vec<crate::rankers::EmbeddingVector>, approach: Approach) -> Result<BTreeMap<String, UnitVector>> {
    ids.iter()
        .zip(vectors)
        .map(|(id, v)| {
            let u = v
                .normalized()
                .map_err(|e| unresolvable(approach, format!("embedding of {id}: {e}")))?;
            Ok((id.clone(), u))
        })
        .collect()
}

/// Resolve every input the configured approaches need: enrichment,
/// query preprocessing, documents, embeddings and popularity models. Fails
/// before any ranking if something is missing.
pub fn prepare(config: &ExperimentConfig, dataset: Dataset, pool: Catalog, ctx: &RunContext) -> Result<Prepared> {
    let approaches = config.approaches.clone();
    let similarity = config.similarity_composition;
    let modes: BTreeSet<(CompositionMode, Approach)> = approaches
        .iter()
        .filter_map(|a| a.composition(similarity).map(|m| (m, *a)))
        .collect();
    let enrich_cfg = ctx.enrich_config(config);

    let mut dataset = dataset;
    let mut pool = pool;
    let mut enrichment_failures = 0;
    if let Some(&(_, approach)) = modes.iter().find(|(m, _)| m.needs_enrichment()) {
        let outcome = enrich_catalog(
            &pool,
            Some(ctx.providers.caption.as_ref()),
            Some(ctx.providers.tag.as_ref()),
            &ctx.prompts,
            &ctx.cache,
            &enrich_cfg,
        )?;
        enrichment_failures = outcome.failures.len();
        pool = outcome.catalog;
        let missing: Vec<&str> = pool.iter().filter(|p| !p.is_enriched()).map(|p| p.product_id.as_str()).collect();
        if let Some(first) = missing.first() {
            return Err(unresolvable(
                approach,
                format!("{} products have no generated text after enrichment (first: {first})", missing.len()),
            ));
        }
        let enriched = Catalog::from_products(
            dataset
                .catalog()
                .iter()
                .map(|p| pool.get(&p.product_id).cloned().unwrap_or_else(|| p.clone())),
        )?;
        dataset = dataset.with_catalog(enriched)?;
    }

    if approaches.contains(&Approach::ImgDirect) {
        if let Some(p) = pool.iter().find(|p| p.image_ref.is_none()) {
            return Err(unresolvable(Approach::ImgDirect, format!("product {} has no image_ref", p.product_id)));
        }
    }

    let mut popularity = BTreeMap::new();
    for &a in &approaches {
        if let Some(scheme) = a.popularity_scheme() {
            let model = fit_popularity(dataset.judgments().iter(), scheme).map_err(|e| unresolvable(a, e.to_string()))?;
            popularity.insert(a, model);
        }
    }

    let mut processed = None;
    let mut preprocess_fallbacks = 0;
    if config.preprocessing.contains(&true) {
        let out = preprocess_queries(
            dataset.queries(),
            ctx.providers.preprocess.as_ref(),
            &ctx.prompts,
            &ctx.cache,
            &enrich_cfg,
        )?;
        preprocess_fallbacks = out.fallback_count();
        processed = Some(out.queries);
    }

    let mut query_text = BTreeMap::new();
    for &flag in &config.preprocessing {
        let texts: BTreeMap<String, String> = dataset
            .queries()
            .iter()
            .map(|q| {
                let text = match (&processed, flag) {
                    (Some(pq), true) => pq[&q.query_id].joined(),
                    _ => q.text.clone(),
                };
                (q.query_id.clone(), text)
            })
            .collect();
        query_text.insert(flag, texts);
    }

    let pool_ids: Vec<String> = pool.ids().map(String::from).collect();
    let mut documents = BTreeMap::new();
    for &(mode, approach) in &modes {
        if mode == CompositionMode::ImgDirect || documents.contains_key(&mode) {
            continue;
        }
        let mut docs = BTreeMap::new();
        for p in pool.iter() {
            let doc = crate::enrichment::compose_document(p, mode, config.char_cap)
                .map_err(|e| unresolvable(approach, e.to_string()))?
                .expect("text modes produce documents");
            docs.insert(p.product_id.clone(), doc);
        }
        documents.insert(mode, docs);
    }

    let batch = config.enrichment.embed_batch;
    let in_flight = config.enrichment.max_in_flight;
    let mut doc_vectors = BTreeMap::new();
    let mut query_vectors = BTreeMap::new();
    let mut image_vectors = BTreeMap::new();
    let mut embed_queries = |space: Space, provider: &dyn Provider, approach: Approach| -> Result<()> {
        for (&flag, texts) in &query_text {
            if query_vectors.contains_key(&(space, flag)) {
                continue;
            }
            let ids: Vec<String> = texts.keys().cloned().collect();
            let values: Vec<String> = texts.values().cloned().collect();
            let vectors = embed_texts_cached(provider, &ctx.cache, &values, batch, in_flight)?;
            query_vectors.insert((space, flag), normalize_all(&ids, vectors, approach)?);
        }
        Ok(())
    };
    for &a in approaches.iter().filter(|a| a.uses_embeddings()) {
        let mode = a.composition(similarity).expect("embedding approaches compose");
        if mode == CompositionMode::ImgDirect {
            let refs: Vec<String> = pool
                .iter()
                .map(|p| p.image_ref.clone().expect("checked above"))
                .collect();
            let vectors = embed_images_cached(ctx.providers.embed_image.as_ref(), &ctx.cache, &refs, in_flight)?;
            image_vectors = normalize_all(&pool_ids, vectors, a)?;
            embed_queries(Space::Image, ctx.providers.embed_image.as_ref(), a)?;
        } else {
            if let Entry::Vacant(slot) = doc_vectors.entry(mode) {
                let texts: Vec<String> = pool_ids.iter().map(|id| documents[&mode][id].clone()).collect();
                let vectors = embed_texts_cached(ctx.providers.embed_text.as_ref(), &ctx.cache, &texts, batch, in_flight)?;
                slot.insert(normalize_all(&pool_ids, vectors, a)?);
            }
            embed_queries(Space::Text, ctx.providers.embed_text.as_ref(), a)?;
        }
    }

    Ok(Prepared {
        dataset,
        pool,
        processed,
        enrichment_failures,
        preprocess_fallbacks,
        approaches,
        similarity,
        documents,
        doc_vectors,
        image_vectors,
        query_text,
        query_vectors,
        popularity,
    })
}

impl Prepared {
    /// Rank the examples of `query_id` in `dataset` (a padded copy of the
    /// prepared dataset) with `approach`.
    pub fn rank(
        &self,
        approach: Approach,
        dataset: &Dataset,
        query_id: &str,
        preprocessed: bool,
        seed: u64,
        ctx: &RunContext,
    ) -> std::result::Result<Ranking, RankError> {
        assert!(self.approaches.contains(&approach), "approach {approach} was not prepared");
        let examples: Vec<String> = dataset
            .judgments()
            .for_query(query_id)
            .iter()
            .map(|j| j.product_id.clone())
            .collect();
        match approach {
            Approach::Random => Ok(rank_random(query_id, &examples, seed)),
            Approach::MostPopular | Approach::MostPopularNonIrrelevant | Approach::MostPopularDecreasing => {
                Ok(rank_most_popular(&self.popularity[&approach], query_id, &examples))
            }
            Approach::CrossEncoder => {
                let docs = &self.documents[&self.similarity];
                let query = &self.query_text[&preprocessed][query_id];
                let texts: Vec<String> = examples.iter().map(|p| docs[p].clone()).collect();
                let scores = cross_scores_cached(ctx, query, &texts)?;
                if scores.len() != examples.len() {
                    return Err(RankError::ScoreCount {
                        query_id: query_id.to_string(),
                        expected: examples.len(),
                        got: scores.len(),
                    });
                }
                Ok(Ranking::from_scores(query_id, examples.into_iter().zip(scores).collect())?)
            }
            _ => {
                let mode = approach.composition(self.similarity).expect("embedding approach");
                let (space, vectors) = if mode == CompositionMode::ImgDirect {
                    (Space::Image, &self.image_vectors)
                } else {
                    (Space::Text, &self.doc_vectors[&mode])
                };
                let query = &self.query_vectors[&(space, preprocessed)][query_id];
                rank_by_unit_similarity(query_id, query, examples.iter().map(|p| (p.as_str(), &vectors[p])))
            }
        }
    }

    /// Provider identities and prompt hashes this preparation depends on.
    fn provenance(&self, ctx: &RunContext) -> (BTreeMap<String, ProviderIdentity>, BTreeMap<String, String>) {
        let mut used = BTreeSet::new();
        let mut hashes = BTreeMap::new();
        if self.documents.keys().any(|m| m.needs_enrichment()) {
            used.insert(Capability::Caption);
            used.insert(Capability::Tag);
            hashes.insert("caption".to_string(), ctx.prompts.caption_hash());
            hashes.insert("tag_vocabulary".to_string(), hash_parts(&ctx.vocabulary));
        }
        if !self.doc_vectors.is_empty() {
            used.insert(Capability::EmbedText);
        }
        if !self.image_vectors.is_empty() {
            used.insert(Capability::EmbedImage);
        }
        if self.approaches.contains(&Approach::CrossEncoder) {
            used.insert(Capability::CrossScore);
        }
        if self.processed.is_some() {
            used.insert(Capability::Preprocess);
            hashes.insert("preprocess".to_string(), ctx.prompts.preprocess_hash());
        }
        let providers = used
            .into_iter()
            .map(|c| (c.route().to_string(), ctx.providers.get(c).identity().clone()))
            .collect();
        (providers, hashes)
    }
}

fn cross_scores_cached(ctx: &RunContext, query: &str, docs: &[String]) -> std::result::Result<Vec<f64>, RankError> {
    let provider = ctx.providers.cross_score.as_ref();
    let input = hash_parts(std::iter::once(query).chain(docs.iter().map(String::as_str)));
    let key = CacheKey::new(Capability::CrossScore, provider.identity(), "", &input);
    let cache_err = |e: crate::enrichment::CacheError| {
        RankError::Provider(ProviderError::InvalidInput(format!("cross-score cache: {e}")))
    };
    if let Some(hit) = ctx.cache.get::<Vec<f64>>(&key).map_err(cache_err)? {
        return Ok(hit);
    }
    let scores = provider.cross_score(query, docs)?;
    ctx.cache.put(&key, &scores).map_err(cache_err)?;
    Ok(scores)
}

fn eval_queries(dataset: &Dataset, split: EvalSplit) -> Vec<String> {
    dataset
        .queries()
        .iter()
        .map(|q| q.query_id.clone())
        .filter(|q| match split {
            EvalSplit::All => true,
            EvalSplit::Test => dataset.query_split(q) == Split::Test,
            EvalSplit::Train => dataset.query_split(q) == Split::Train,
        })
        .collect()
}

/// Seed for padding at (`pad_size`, `run`).
pub fn pad_seed(config: &ExperimentConfig, pad_size: usize, run: usize) -> u64 {
    let run = if config.resample_padding { run } else { 0 };
    derive_seed(config.seed, &["pad", &pad_size.to_string(), &run.to_string()])
}

/// Seed for one stochastic ranking pass.
pub fn ranker_seed(config: &ExperimentConfig, approach: Approach, pad_size: usize, run: usize, ordering: usize) -> u64 {
    derive_seed(
        config.seed,
        &[approach.name(), &pad_size.to_string(), &run.to_string(), &ordering.to_string()],
    )
}

#[allow(clippy::too_many_arguments)]
fn score_run(
    config: &ExperimentConfig,
    prepared: &Prepared,
    ctx: &RunContext,
    padded: &Dataset,
    queries: &[String],
    approach: Approach,
    preprocessed: bool,
    seed: u64,
) -> Result<RunScores> {
    let exec = config.exec_mode();
    let outcomes = exec.try_map(queries, |qid| -> std::result::Result<(String, QueryOutcome), (String, RankError)> {
        let ranking = prepared
            .rank(approach, padded, qid, preprocessed, seed, ctx)
            .map_err(|e| (qid.clone(), e))?;
        let outcome = ndcg(&ranking, padded.judgments(), &config.gain_scheme, config.k)
            .map_err(|e| (qid.clone(), RankError::Metric(e)))?;
        Ok((qid.clone(), outcome))
    });
    outcomes.map(RunScores::from_iter).map_err(|(qid, source)| RunnerError::Rank {
        context: format!("{approach}, query {qid}"),
        source,
    })
}

/// Load the configured dataset and run the full grid.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = load_dataset(&config.data)?;
    let ctx = RunContext::from_config(config)?;
    run_experiment_on(config, &dataset, &ctx)
}

/// Run the grid over the bi-encoder and cross-encoder approaches only,
/// holding everything else in `config` fixed.
pub fn compare_similarity_backends(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut config = config.clone();
    config.approaches = vec![Approach::BiEncoder, Approach::CrossEncoder];
    let mut report = run_experiment(&config)?;
    report.notes.push(FULL_CORPUS_REFERENCE.to_string());
    Ok(report)
}

/// Run `f` on a pool of `jobs` workers (the global pool when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    if let Some(n) = jobs.filter(|n| *n > 1) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| RunnerError::Config(format!("thread pool: {e}")))?;
        return Ok(pool.install(f));
    }
    let _ = jobs;
    Ok(f())
}

/// Run the grid over an already loaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, dataset: &Dataset, ctx: &RunContext) -> Result<ExperimentReport> {
    config.validate()?;
    with_jobs(config.jobs, || run_grid(config, dataset, ctx))?
}

fn run_grid(config: &ExperimentConfig, dataset: &Dataset, ctx: &RunContext) -> Result<ExperimentReport> {
    let filtered = filter_by_popularity(dataset, config.min_occurrences)?;
    let pool = match config.pad_source {
        PadSource::Filtered => filtered.catalog().clone(),
        PadSource::Full => dataset.catalog().clone(),
    };
    let prepared = prepare(config, filtered, pool, ctx)?;
    let queries = eval_queries(&prepared.dataset, config.eval_split);
    if queries.is_empty() {
        return Err(RunnerError::NoEvalQueries(config.eval_split));
    }

    // (approach, preprocessing, pad) -> per-run (score, skipped, scored).
    type CellKey = (usize, usize, usize);
    let mut runs: BTreeMap<CellKey, Vec<(f64, usize, usize)>> = BTreeMap::new();
    let mut label_stats = Vec::new();
    let mut pad_seeds = Vec::new();
    for (pi, &pad_size) in config.pad_sizes.iter().enumerate() {
        for run in 0..config.runs {
            let seed = pad_seed(config, pad_size, run);
            pad_seeds.push(PadSeed { pad_size, run, seed });
            let padded = pad_with_irrelevant_from(
                &prepared.dataset,
                PadConfig { pad_size, seed },
                Some(&prepared.pool),
                config.exec_mode(),
            );
            if run == 0 {
                label_stats.push(PadLabelStats {
                    pad_size,
                    stats: compute_label_stats(&padded.dataset)?,
                    exhaustion_warnings: padded.warnings.len(),
                });
            }
            for (ai, &approach) in config.approaches.iter().enumerate() {
                for (fi, &flag) in config.preprocessing.iter().enumerate() {
                    let orderings = if approach == Approach::Random { config.random_orderings } else { 1 };
                    let mut scores = Vec::with_capacity(orderings);
                    let (mut skipped, mut scored) = (0, 0);
                    for ordering in 0..orderings {
                        let rseed = ranker_seed(config, approach, pad_size, run, ordering);
                        let rs = score_run(config, &prepared, ctx, &padded.dataset, &queries, approach, flag, rseed)?;
                        let context = format!("{approach}, pad {pad_size}, run {run}");
                        let score = rs.dataset_score(config.weighting).ok_or(RunnerError::Metric {
                            context,
                            source: MetricError::NothingToScore { run },
                        })?;
                        scores.push(score);
                        skipped = rs.skipped();
                        scored = rs.scored();
                    }
                    let score = median(&scores).expect("at least one ordering");
                    runs.entry((ai, fi, pi)).or_default().push((score, skipped, scored));
                }
            }
        }
    }

    let mut cells = Vec::new();
    for ((ai, fi, pi), per_run) in runs {
        let scores = per_run.iter().map(|r| r.0).collect();
        let skipped = per_run.iter().map(|r| r.1).max().unwrap_or(0);
        let scored = per_run.iter().map(|r| r.2).min().unwrap_or(0);
        let summary = summarize_scores(scores, skipped, scored).map_err(|source| RunnerError::Metric {
            context: "aggregation".into(),
            source,
        })?;
        cells.push(ReportCell {
            approach: config.approaches[ai],
            preprocessing: config.preprocessing[fi],
            pad_size: config.pad_sizes[pi],
            summary,
        });
    }

    let (providers, prompt_hashes) = prepared.provenance(ctx);
    let provenance = ReportProvenance {
        seed: config.seed,
        pad_seeds,
        providers,
        prompt_hashes,
        dataset: DatasetSizes {
            products: prepared.dataset.catalog().len(),
            queries: prepared.dataset.queries().len(),
            judgments: prepared.dataset.judgments().len(),
            pool_products: prepared.pool.len(),
            eval_queries: queries.len(),
        },
        enrichment_failures: prepared.enrichment_failures,
        preprocess_fallbacks: prepared.preprocess_fallbacks,
    };
    Ok(ExperimentReport {
        cells,
        label_stats,
        gain_scheme: config.gain_scheme,
        k: config.k,
        weighting: config.weighting,
        provenance,
        config: config.snapshot(),
        notes: Vec::new(),
    })
}

#[cfg(test)]
mod tests;
