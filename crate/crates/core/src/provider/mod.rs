//! Inference providers: embeddings, captions, tags, pair scores and query
//! rewrites, behind one trait with an HTTP client and deterministic stubs.
//!
//! Wire protocol: `POST <base>/<route>` with a JSON body, JSON response.
//!
//! | route          | request                         | response                |
//! |----------------|---------------------------------|-------------------------|
//! | `embed_text`   | `model`, `texts`                | `model`, `vectors`      |
//! | `embed_image`  | `model`, `image_ref`/`image_b64`| `model`, `vector`       |
//! | `caption`      | `model`, `image_ref`, `prompt`  | `model`, `text`         |
//! | `tag`          | `model`, `image_ref`, `vocabulary` | `model`, `tags` (`tag`, `score`) |
//! | `cross_score`  | `model`, `query`, `docs`        | `model`, `scores`       |
//! | `preprocess`   | `model`, `query`, `prompt`      | `model`, `keywords`     |
//!
//! Batched responses are index-aligned with their request arrays.

pub mod fake_server;
pub mod http;
mod limiter;
pub mod stub;
pub mod text;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rankers::EmbeddingVector;

pub use http::{HttpProvider, ImageTransfer, ProviderEndpoint, RetryPolicy};
pub use limiter::InFlightLimiter;
pub use stub::{StubConfig, StubProvider};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("{route}: transport failure: {message}")]
    Transport { route: String, message: String },
    #[error("{route}: timed out")]
    Timeout { route: String },
    #[error("{route}: provider returned HTTP {status}: {body}")]
    Status {
        route: String,
        status: u16,
        body: String,
    },
    #[error("{route}: malformed response: {message}")]
    Protocol { route: String, message: String },
    #[error("{route}: empty response")]
    Empty { route: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("provider {provider_id:?} does not support {capability}")]
    Unsupported {
        provider_id: String,
        capability: Capability,
    },
    #[error("cancelled")]
    Cancelled,
    #[error("{route}: gave up after {attempts} attempts: {last}")]
    Exhausted {
        route: String,
        attempts: u32,
        last: Box<ProviderError>,
    },
}

impl ProviderError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } | ProviderError::Timeout { .. } => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ProviderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    EmbedText,
    EmbedImage,
    Caption,
    Tag,
    CrossScore,
    Preprocess,
}

impl Capability {
    pub fn route(self) -> &'static str {
        match self {
            Capability::EmbedText => "embed_text",
            Capability::EmbedImage => "embed_image",
            Capability::Caption => "caption",
            Capability::Tag => "tag",
            Capability::CrossScore => "cross_score",
            Capability::Preprocess => "preprocess",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.route())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIdentity {
    pub provider_id: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTag {
    pub tag: String,
    pub score: f64,
}

/// One inference backend. Implementations must be safe for concurrent use.
pub trait Provider: Send + Sync {
    fn identity(&self) -> &ProviderIdentity;

    /// One vector per text, in input order, all the same dimension.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector>;

    /// Non-empty caption text.
    fn caption_image(&self, image_ref: &str, prompt: &str) -> Result<String>;

    /// A score for every vocabulary entry, sorted descending.
    fn tag_image(&self, image_ref: &str, vocabulary: &[String]) -> Result<Vec<ScoredTag>>;

    /// One score per document, in input order.
    fn cross_score(&self, query: &str, docs: &[String]) -> Result<Vec<f64>>;

    /// Non-empty keyword list.
    fn preprocess_query(&self, query: &str, prompt: &str) -> Result<Vec<String>>;
}

/// Wrapper counting calls that reach the inner provider.
pub struct CountingProvider<P> {
    inner: P,
    calls: std::sync::atomic::AtomicUsize,
}

impl<P: Provider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        CountingProvider {
            inner,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }
}

impl<P: Provider> Provider for CountingProvider<P> {
    fn identity(&self) -> &ProviderIdentity {
        self.inner.identity()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.tick();
        self.inner.embed_texts(texts)
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector> {
        self.tick();
        self.inner.embed_image(image_ref)
    }

    fn caption_image(&self, image_ref: &str, prompt: &str) -> Result<String> {
        self.tick();
        self.inner.caption_image(image_ref, prompt)
    }

    fn tag_image(&self, image_ref: &str, vocabulary: &[String]) -> Result<Vec<ScoredTag>> {
        self.tick();
        self.inner.tag_image(image_ref, vocabulary)
    }

    fn cross_score(&self, query: &str, docs: &[String]) -> Result<Vec<f64>> {
        self.tick();
        self.inner.cross_score(query, docs)
    }

    fn preprocess_query(&self, query: &str, prompt: &str) -> Result<Vec<String>> {
        self.tick();
        self.inner.preprocess_query(query, prompt)
    }
}

/// Shared flag that aborts outstanding and future requests.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Parse a comma-separated keyword response: split on commas, trim, drop empties.
pub fn parse_keywords(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Sort tags by descending score, ties by tag text.
pub(crate) fn sort_tags(tags: &mut [ScoredTag]) {
    tags.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tag.cmp(&b.tag)));
}

/// Provider selection for one capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Stub(StubConfig),
    Http(ProviderEndpoint),
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Stub(StubConfig::default())
    }
}

impl ProviderSpec {
    /// Instantiate, sharing `global` as the cross-provider in-flight limit.
    pub fn build(&self, global: &Arc<InFlightLimiter>, cancel: &CancelToken) -> Arc<dyn Provider> {
        match self {
            ProviderSpec::Stub(cfg) => Arc::new(StubProvider::new(cfg.clone())),
            ProviderSpec::Http(ep) => Arc::new(HttpProvider::new(ep.clone(), Arc::clone(global), cancel.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_parsing() {
        assert_eq!(
            parse_keywords("paper bags, without handle, packaging, eco-friendly, retail"),
            vec!["paper bags", "without handle", "packaging", "eco-friendly", "retail"]
        );
        assert_eq!(parse_keywords(" a , , b "), vec!["a", "b"]);
        assert_eq!(
            parse_keywords("lawnmower, tires, without rims"),
            vec!["lawnmower", "tires", "without rims"]
        );
        assert!(parse_keywords(" , ,").is_empty());
    }

    #[test]
    fn retryable_classification() {
        let s = |status| ProviderError::Status {
            route: "x".into(),
            status,
            body: String::new(),
        };
        assert!(s(503).is_retryable());
        assert!(s(429).is_retryable());
        assert!(!s(400).is_retryable());
        assert!(ProviderError::Timeout { route: "x".into() }.is_retryable());
        assert!(!ProviderError::Protocol {
            route: "x".into(),
            message: String::new()
        }
        .is_retryable());
    }

    #[test]
    fn spec_serde() {
        let spec: ProviderSpec = toml::from_str("kind = \"stub\"\ndimension = 32").unwrap();
        assert_eq!(
            spec,
            ProviderSpec::Stub(StubConfig {
                dimension: 32,
                ..StubConfig::default()
            })
        );
        let http: ProviderSpec = toml::from_str(
            "kind = \"http\"\nbase_url = \"http://localhost:9\"\nprovider_id = \"p\"\nmodel_id = \"m\"\nauth_env = \"TOKEN\"",
        )
        .unwrap();
        match http {
            ProviderSpec::Http(ep) => {
                assert_eq!(ep.timeout_ms, 30_000);
                assert_eq!(ep.retry.max_attempts, 3);
                assert_eq!(ep.retry.initial_backoff_ms, 500);
                assert_eq!(ep.retry.multiplier, 2.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
