//! Searchable-document composition and provider-backed catalog enrichment.
//!
//! Every provider output flows through [`EnrichmentCache`], keyed by
//! provider, model, prompt hash and input hash, so a second pass over
//! unchanged inputs makes no provider calls.

mod cache;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::catalog::{
    Catalog, GeneratedTags, GeneratedText, ProcessedQuery, ProcessedQuerySet, Product, Provenance, QuerySet,
};
use crate::hashing::{hash_parts, sha256_hex};
use crate::par::bounded_map;
use crate::provider::{Capability, Provider, ProviderError, ScoredTag};
use crate::rankers::EmbeddingVector;

pub use cache::{CacheEntry, CacheError, CacheKey, CacheStats, EnrichmentCache};

pub const DEFAULT_CHAR_CAP: usize = 2000;

pub const PREPROCESS_PROMPT: &str =
    "Extract at least 5 related tags or usage keywords from queries. Output in English as a comma separated list.";

/// Small illustrative tag vocabulary; real runs should supply their own.
pub const DEFAULT_TAG_VOCABULARY: &[&str] = &[
    "red", "blue", "black", "white", "green", "pink", "cotton", "leather", "metal", "plastic", "wood", "silk",
    "kitchen", "outdoor", "office", "bathroom", "baby", "kids", "women", "men", "pet", "sports", "electronics",
    "toy",
];

#[derive(Debug, thiserror::Error)]
pub enum EnrichError {
    #[error("product {product_id} has no generated caption or tags; {mode} needs enrichment")]
    MissingEnrichment { product_id: String, mode: CompositionMode },
    #[error("product {product_id} produced an empty {mode} document")]
    EmptyDocument { product_id: String, mode: CompositionMode },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{stage}: {failed} of {total} items failed, above the {threshold} failure threshold")]
    FailureRate {
        stage: &'static str,
        failed: usize,
        total: usize,
        threshold: f64,
        failures: Vec<EnrichFailure>,
    },
    #[error("{path}:{line}: {message}")]
    PromptFile { path: PathBuf, line: usize, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown composition mode {0:?}")]
    UnknownMode(String),
}

pub type Result<T> = std::result::Result<T, EnrichError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// Human-authored fields only.
    Text,
    /// Generated caption and tags only.
    ImgGen,
    /// Human text followed by generated text.
    TextPlusImgGen,
    /// No document; the image itself is embedded.
    ImgDirect,
}

impl CompositionMode {
    pub const ALL: [CompositionMode; 4] = [
        CompositionMode::Text,
        CompositionMode::ImgGen,
        CompositionMode::TextPlusImgGen,
        CompositionMode::ImgDirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompositionMode::Text => "text",
            CompositionMode::ImgGen => "img_gen",
            CompositionMode::TextPlusImgGen => "text_plus_img_gen",
            CompositionMode::ImgDirect => "img_direct",
        }
    }

    pub fn needs_enrichment(self) -> bool {
        matches!(self, CompositionMode::ImgGen | CompositionMode::TextPlusImgGen)
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompositionMode {
    type Err = EnrichError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| EnrichError::UnknownMode(s.to_string()))
    }
}

fn join_nonempty<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts
        .into_iter()
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn text_document(p: &Product) -> String {
    join_nonempty([
        p.title.as_str(),
        &p.description,
        &p.bullet_points,
        &p.brand,
        &p.color,
    ])
}

fn generated_document(p: &Product) -> String {
    let tags = p
        .generated_tags
        .as_ref()
        .map(|t| t.tags.join(", "))
        .unwrap_or_default();
    let caption = p.generated_caption.as_ref().map(|c| c.text.as_str()).unwrap_or("");
    join_nonempty([caption, &tags])
}

fn cap_chars(text: String, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((byte, _)) => text[..byte].to_string(),
        None => text,
    }
}

/// Build the searchable document for `product` under `mode`, truncated to
/// `char_cap` characters. `None` for [`CompositionMode::ImgDirect`].
pub fn compose_document(product: &Product, mode: CompositionMode, char_cap: usize) -> Result<Option<String>> {
    if mode.needs_enrichment() && !product.is_enriched() {
        return Err(EnrichError::MissingEnrichment {
            product_id: product.product_id.clone(),
            mode,
        });
    }
    let doc = match mode {
        CompositionMode::ImgDirect => return Ok(None),
        CompositionMode::Text => text_document(product),
        CompositionMode::ImgGen => generated_document(product),
        CompositionMode::TextPlusImgGen => join_nonempty([text_document(product).as_str(), &generated_document(product)]),
    };
    if doc.is_empty() {
        return Err(EnrichError::EmptyDocument {
            product_id: product.product_id.clone(),
            mode,
        });
    }
    Ok(Some(cap_chars(doc, char_cap)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedPrompt {
    pub name: String,
    pub text: String,
}

/// Prompts for captioning, per-feature extraction and query preprocessing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: String,
    pub caption: String,
    /// Extra questions whose answers are appended to the caption, in order.
    pub features: Vec<NamedPrompt>,
    pub preprocess: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        let feature = |name: &str, text: &str| NamedPrompt {
            name: name.into(),
            text: text.into(),
        };
        PromptSet {
            version: "default-1".into(),
            caption: "Describe the product shown in this image in one sentence.".into(),
            features: vec![
                feature("color", "What color is the product in this image?"),
                feature("material", "What material is the product in this image made of?"),
                feature("usage", "What is the product in this image used for?"),
                feature("intended_user", "Who is the intended user of the product in this image?"),
            ],
            preprocess: PREPROCESS_PROMPT.into(),
        }
    }
}

#[derive(Deserialize)]
struct PromptRecord {
    name: String,
    text: String,
    #[serde(default)]
    version: Option<String>,
}

impl PromptSet {
    /// Caption-only prompt set, no feature questions.
    pub fn caption_only(caption: impl Into<String>) -> Self {
        PromptSet {
            caption: caption.into(),
            features: Vec::new(),
            ..PromptSet::default()
        }
    }

    /// Caption prompt followed by the feature prompts.
    pub fn caption_prompts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.caption.as_str()).chain(self.features.iter().map(|f| f.text.as_str()))
    }

    /// Hash identifying the full caption recipe.
    pub fn caption_hash(&self) -> String {
        hash_parts(self.caption_prompts())
    }

    pub fn preprocess_hash(&self) -> String {
        sha256_hex(self.preprocess.as_bytes())
    }

    /// Load a JSONL file of `{"name", "text", "version"?}` records. `caption`
    /// and `preprocess` are reserved names; every other record is a feature
    /// prompt, kept in file order. Missing reserved prompts take defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| EnrichError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let defaults = PromptSet::default();
        let mut set = PromptSet {
            version: "custom".into(),
            features: Vec::new(),
            ..defaults
        };
        let mut seen = BTreeSet::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| EnrichError::PromptFile {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: PromptRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if rec.text.trim().is_empty() {
                return Err(bad(format!("prompt {:?} is empty", rec.name)));
            }
            if !seen.insert(rec.name.clone()) {
                return Err(bad(format!("duplicate prompt {:?}", rec.name)));
            }
            if let Some(v) = rec.version {
                set.version = v;
            }
            match rec.name.as_str() {
                "caption" => set.caption = rec.text,
                "preprocess" => set.preprocess = rec.text,
                _ => set.features.push(NamedPrompt {
                    name: rec.name,
                    text: rec.text,
                }),
            }
        }
        Ok(set)
    }
}

/// Read a tag vocabulary: one tag per line, blank lines and `#` comments
/// ignored, duplicates dropped.
pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path).map_err(|source| EnrichError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut seen = BTreeSet::new();
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter(|l| seen.insert(l.to_string()))
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichConfig {
    pub vocabulary: Vec<String>,
    pub top_k: usize,
    pub max_in_flight: usize,
    /// Largest tolerated fraction of failed items.
    pub failure_threshold: f64,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        EnrichConfig {
            vocabulary: DEFAULT_TAG_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            top_k: 5,
            max_in_flight: 4,
            failure_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichFailure {
    pub id: String,
    pub capability: Capability,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct EnrichOutcome {
    pub catalog: Catalog,
    pub failures: Vec<EnrichFailure>,
    /// Products without an image reference; left untouched.
    pub skipped: Vec<String>,
    pub provider_calls: usize,
}

fn check_rate(stage: &'static str, failures: Vec<EnrichFailure>, total: usize, threshold: f64) -> Result<Vec<EnrichFailure>> {
    let failed: BTreeSet<&str> = failures.iter().map(|f| f.id.as_str()).collect();
    let failed = failed.len();
    if total > 0 && failed as f64 / total as f64 > threshold {
        return Err(EnrichError::FailureRate {
            stage,
            failed,
            total,
            threshold,
            failures,
        });
    }
    Ok(failures)
}

/// Look up `key`, calling `f` on a miss and storing its result.
fn cached<T, F>(cache: &EnrichmentCache, key: &CacheKey, calls: &AtomicUsize, f: F) -> Result<std::result::Result<T, ProviderError>>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: FnOnce() -> std::result::Result<T, ProviderError>,
{
    if let Some(hit) = cache.get(key)? {
        return Ok(Ok(hit));
    }
    calls.fetch_add(1, Ordering::SeqCst);
    match f() {
        Ok(v) => {
            cache.put(key, &v)?;
            Ok(Ok(v))
        }
        Err(e) => Ok(Err(e)),
    }
}

fn provenance(provider: &dyn Provider, prompt_hash: String) -> Provenance {
    let id = provider.identity();
    Provenance {
        provider_id: id.provider_id.clone(),
        model_id: id.model_id.clone(),
        prompt_hash,
    }
}

/// Generate captions and/or tags for every product with an image reference.
/// A `None` provider leaves that field alone. Per-product failures are
/// recorded and the product keeps its previous fields; the call fails only
/// when the failed fraction exceeds `config.failure_threshold`.
pub fn enrich_catalog(
    catalog: &Catalog,
    caption_provider: Option<&dyn Provider>,
    tag_provider: Option<&dyn Provider>,
    prompts: &PromptSet,
    cache: &EnrichmentCache,
    config: &EnrichConfig,
) -> Result<EnrichOutcome> {
    let products: Vec<&Product> = catalog.iter().collect();
    let targets: Vec<&Product> = products.iter().copied().filter(|p| p.image_ref.is_some()).collect();
    let skipped = products
        .iter()
        .filter(|p| p.image_ref.is_none())
        .map(|p| p.product_id.clone())
        .collect();
    let calls = AtomicUsize::new(0);
    let caption_hash = prompts.caption_hash();
    let vocab_hash = hash_parts(&config.vocabulary);

    let results = bounded_map(&targets, config.max_in_flight, |p| -> Result<(Product, Vec<EnrichFailure>)> {
        let image = p.image_ref.as_deref().expect("targets have images");
        let mut out = (*p).clone();
        let mut failures = Vec::new();
        if let Some(provider) = caption_provider {
            let mut answers = Vec::new();
            let mut failed = None;
            for prompt in prompts.caption_prompts() {
                let key = CacheKey::new(Capability::Caption, provider.identity(), &sha256_hex(prompt.as_bytes()), image);
                match cached(cache, &key, &calls, || provider.caption_image(image, prompt))? {
                    Ok(text) => answers.push(text),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            match failed {
                None => {
                    out.generated_caption = Some(GeneratedText {
                        text: join_nonempty(answers.iter().map(String::as_str)),
                        provenance: provenance(provider, caption_hash.clone()),
                    })
                }
                Some(e) => failures.push(EnrichFailure {
                    id: p.product_id.clone(),
                    capability: Capability::Caption,
                    message: e.to_string(),
                }),
            }
        }
        if let Some(provider) = tag_provider {
            let key = CacheKey::new(Capability::Tag, provider.identity(), &vocab_hash, image);
            match cached(cache, &key, &calls, || provider.tag_image(image, &config.vocabulary))? {
                Ok(tags) => {
                    let tags: Vec<ScoredTag> = tags;
                    out.generated_tags = Some(GeneratedTags {
                        tags: tags.into_iter().take(config.top_k).map(|t| t.tag).collect(),
                        provenance: provenance(provider, vocab_hash.clone()),
                    })
                }
                Err(e) => failures.push(EnrichFailure {
                    id: p.product_id.clone(),
                    capability: Capability::Tag,
                    message: e.to_string(),
                }),
            }
        }
        Ok((out, failures))
    });

    let mut enriched = catalog.clone();
    let mut failures = Vec::new();
    for r in results {
        let (product, f) = r?;
        enriched.upsert(product);
        failures.extend(f);
    }
    let failures = check_rate("enrich", failures, targets.len(), config.failure_threshold)?;
    Ok(EnrichOutcome {
        catalog: enriched,
        failures,
        skipped,
        provider_calls: calls.into_inner(),
    })
}

#[derive(Debug, Clone)]
pub struct PreprocessOutcome {
    pub queries: ProcessedQuerySet,
    /// Transport-level failures; those queries fell back to their text.
    pub failures: Vec<EnrichFailure>,
    pub provider_calls: usize,
}

impl PreprocessOutcome {
    pub fn fallback_count(&self) -> usize {
        self.queries.values().filter(|q| q.fallback).count()
    }
}

/// Rewrite every query into keywords. Empty or unusable responses fall
/// back to the original text as the single keyword (flagged). Failures to
/// reach the provider also fall back, but count toward the failure
/// threshold.
pub fn preprocess_queries(
    queries: &QuerySet,
    provider: &dyn Provider,
    prompts: &PromptSet,
    cache: &EnrichmentCache,
    config: &EnrichConfig,
) -> Result<PreprocessOutcome> {
    let items: Vec<_> = queries.iter().collect();
    let calls = AtomicUsize::new(0);
    let prompt_hash = prompts.preprocess_hash();
    let results = bounded_map(&items, config.max_in_flight, |q| -> Result<(ProcessedQuery, Option<EnrichFailure>)> {
        let key = CacheKey::new(Capability::Preprocess, provider.identity(), &prompt_hash, &q.text);
        let answer = cached(cache, &key, &calls, || provider.preprocess_query(&q.text, &prompts.preprocess))?;
        let (keywords, fallback, failure) = match answer {
            Ok(k) if !k.is_empty() => (k, false, None),
            Ok(_) => (vec![q.text.clone()], true, None),
            Err(e) => {
                let failure = e.is_retryable() || matches!(e, ProviderError::Exhausted { .. } | ProviderError::Cancelled);
                let failure = failure.then(|| EnrichFailure {
                    id: q.query_id.clone(),
                    capability: Capability::Preprocess,
                    message: e.to_string(),
                });
                (vec![q.text.clone()], true, failure)
            }
        };
        Ok((
            ProcessedQuery {
                query_id: q.query_id.clone(),
                original_text: q.text.clone(),
                keywords,
                provenance: (!fallback).then(|| provenance(provider, prompt_hash.clone())),
                fallback,
            },
            failure,
        ))
    });
    let mut processed = ProcessedQuerySet::new();
    let mut failures = Vec::new();
    for r in results {
        let (pq, f) = r?;
        failures.extend(f);
        processed.insert(pq.query_id.clone(), pq);
    }
    let failures = check_rate("preprocess", failures, items.len(), config.failure_threshold)?;
    Ok(PreprocessOutcome {
        queries: processed,
        failures,
        provider_calls: calls.into_inner(),
    })
}

pub const DEFAULT_EMBED_BATCH: usize = 32;

/// Embed `texts` through the cache, one vector per input in order. Misses
/// are de-duplicated and sent in batches of `batch_size`.
pub fn embed_texts_cached(
    provider: &dyn Provider,
    cache: &EnrichmentCache,
    texts: &[String],
    batch_size: usize,
    max_in_flight: usize,
) -> Result<Vec<EmbeddingVector>> {
    let mut known: BTreeMap<&str, EmbeddingVector> = BTreeMap::new();
    let mut missing: Vec<&str> = Vec::new();
    let mut queued: BTreeSet<&str> = BTreeSet::new();
    for t in texts {
        if known.contains_key(t.as_str()) || !queued.insert(t.as_str()) {
            continue;
        }
        let key = CacheKey::new(Capability::EmbedText, provider.identity(), "", t);
        match cache.get::<EmbeddingVector>(&key)? {
            Some(v) => {
                known.insert(t, v);
            }
            None => missing.push(t),
        }
    }
    let batches: Vec<&[&str]> = missing.chunks(batch_size.max(1)).collect();
    let fetched = bounded_map(&batches, max_in_flight, |batch| {
        let owned: Vec<String> = batch.iter().map(|s| s.to_string()).collect();
        provider.embed_texts(&owned)
    });
    for (batch, result) in batches.iter().zip(fetched) {
        for (text, vector) in batch.iter().zip(result?) {
            let key = CacheKey::new(Capability::EmbedText, provider.identity(), "", text);
            cache.put(&key, &vector)?;
            known.insert(text, vector);
        }
    }
    Ok(texts.iter().map(|t| known[t.as_str()].clone()).collect())
}

/// Embed images by reference through the cache, one vector per input.
pub fn embed_images_cached(
    provider: &dyn Provider,
    cache: &EnrichmentCache,
    image_refs: &[String],
    max_in_flight: usize,
) -> Result<Vec<EmbeddingVector>> {
    let results = bounded_map(image_refs, max_in_flight, |r| -> Result<EmbeddingVector> {
        let key = CacheKey::new(Capability::EmbedImage, provider.identity(), "", r);
        if let Some(v) = cache.get(&key)? {
            return Ok(v);
        }
        let v = provider.embed_image(r)?;
        cache.put(&key, &v)?;
        Ok(v)
    });
    results.into_iter().collect()
}
