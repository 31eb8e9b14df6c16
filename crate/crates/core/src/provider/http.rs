//! Blocking HTTP client for the provider wire protocol.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    parse_keywords, sort_tags, CancelToken, Capability, InFlightLimiter, Provider, ProviderError,
    ProviderIdentity, Result, ScoredTag,
};
use crate::rankers::EmbeddingVector;

const REDACTED: &str = "[REDACTED]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total transport attempts, including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts are 1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis((self.initial_backoff_ms as f64 * factor).round() as u64)
    }
}

/// How image references travel to the provider.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTransfer {
    /// Send the locator string; the provider resolves it.
    #[default]
    Locator,
    /// Read the file locally and send base64 bytes.
    Bytes,
}

/// Connection settings for one provider. Holds the *name* of the environment
/// variable carrying the bearer token, never the token itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub base_url: String,
    pub provider_id: String,
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub image_transfer: ImageTransfer,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    4
}

impl ProviderEndpoint {
    pub fn new(base_url: impl Into<String>, provider_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        ProviderEndpoint {
            base_url: base_url.into(),
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            auth_env: None,
            max_in_flight: default_max_in_flight(),
            image_transfer: ImageTransfer::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(ProviderError::InvalidInput(format!("{}: timeout must be > 0", self.provider_id)));
        }
        if self.retry.max_attempts == 0 {
            return Err(ProviderError::InvalidInput(format!(
                "{}: retry.max_attempts must be >= 1",
                self.provider_id
            )));
        }
        if self.base_url.is_empty() {
            return Err(ProviderError::InvalidInput(format!("{}: empty base_url", self.provider_id)));
        }
        Ok(())
    }
}

pub struct HttpProvider {
    endpoint: ProviderEndpoint,
    identity: ProviderIdentity,
    agent: ureq::Agent,
    global: Arc<InFlightLimiter>,
    local: InFlightLimiter,
    cancel: CancelToken,
    transport_calls: AtomicU64,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl HttpProvider {
    pub fn new(endpoint: ProviderEndpoint, global: Arc<InFlightLimiter>, cancel: CancelToken) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms.max(1))))
            .http_status_as_error(false)
            .build();
        let identity = ProviderIdentity {
            provider_id: endpoint.provider_id.clone(),
            model_id: endpoint.model_id.clone(),
        };
        HttpProvider {
            local: InFlightLimiter::new(endpoint.max_in_flight),
            agent: config.into(),
            identity,
            endpoint,
            global,
            cancel,
            transport_calls: AtomicU64::new(0),
        }
    }

    /// Standalone client with its own global limit and cancel token.
    pub fn standalone(endpoint: ProviderEndpoint) -> Self {
        let limit = endpoint.max_in_flight;
        HttpProvider::new(endpoint, Arc::new(InFlightLimiter::new(limit)), CancelToken::new())
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn transport_calls(&self) -> u64 {
        self.transport_calls.load(Ordering::SeqCst)
    }

    fn token(&self) -> Option<String> {
        let var = self.endpoint.auth_env.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }

    fn redact(text: String, token: Option<&str>) -> String {
        match token {
            Some(t) if !t.is_empty() => text.replace(t, REDACTED),
            _ => text,
        }
    }

    fn url(&self, cap: Capability) -> String {
        format!("{}/{}", self.endpoint.base_url.trim_end_matches('/'), cap.route())
    }

    /// One HTTP round trip, no retries.
    fn attempt(&self, cap: Capability, body: &Value, token: Option<&str>) -> Result<Value> {
        let route = cap.route().to_string();
        let _local = self.local.acquire();
        let _global = self.global.acquire();
        if self.cancel.is_cancelled() {
            return Err(ProviderError::Cancelled);
        }
        self.transport_calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(self.url(cap)).header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let sent = req.send_json(body);
        if self.cancel.is_cancelled() {
            return Err(ProviderError::Cancelled);
        }
        let mut resp = sent.map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout { route: route.clone() },
            other => ProviderError::Transport {
                route: route.clone(),
                message: Self::redact(other.to_string(), token),
            },
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout { route: route.clone() },
            other => ProviderError::Transport {
                route: route.clone(),
                message: Self::redact(other.to_string(), token),
            },
        })?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status {
                route,
                status,
                body: Self::redact(text, token),
            });
        }
        if text.trim().is_empty() {
            return Err(ProviderError::Empty { route });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol {
            route,
            message: Self::redact(e.to_string(), token),
        })
    }

    fn sleep_cancellable(&self, total: Duration) -> Result<()> {
        let step = Duration::from_millis(10);
        let mut left = total;
        while !left.is_zero() {
            if self.cancel.is_cancelled() {
                return Err(ProviderError::Cancelled);
            }
            let d = left.min(step);
            std::thread::sleep(d);
            left -= d;
        }
        Ok(())
    }

    /// POST with retry/backoff; returns the decoded response record.
    fn call<T: DeserializeOwned>(&self, cap: Capability, body: Value) -> Result<T> {
        let token = self.token();
        let policy = &self.endpoint.retry;
        let attempts = policy.max_attempts.max(1);
        let mut attempt = 1;
        let value = loop {
            match self.attempt(cap, &body, token.as_deref()) {
                Ok(v) => break v,
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("{e}; retrying (attempt {attempt}/{attempts})");
                    self.sleep_cancellable(policy.backoff(attempt))?;
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && attempts > 1 => {
                    return Err(ProviderError::Exhausted {
                        route: cap.route().into(),
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        };
        serde_json::from_value(value).map_err(|e| ProviderError::Protocol {
            route: cap.route().into(),
            message: e.to_string(),
        })
    }

    fn model_of(&self, reported: Option<String>) -> String {
        reported.filter(|m| !m.is_empty()).unwrap_or_else(|| self.endpoint.model_id.clone())
    }

    fn protocol(cap: Capability, message: impl Into<String>) -> ProviderError {
        ProviderError::Protocol {
            route: cap.route().into(),
            message: message.into(),
        }
    }
}

#[derive(Deserialize)]
struct VectorsResponse {
    model: Option<String>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct VectorResponse {
    model: Option<String>,
    vector: Vec<f64>,
}

#[derive(Deserialize)]
struct TextResponse {
    text: Option<String>,
}

#[derive(Deserialize)]
struct TagsResponse {
    tags: Vec<ScoredTag>,
}

#[derive(Deserialize)]
struct ScoresResponse {
    scores: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Keywords {
    List(Vec<String>),
    Raw(String),
}

#[derive(Deserialize)]
struct KeywordsResponse {
    keywords: Option<Keywords>,
}

impl Provider for HttpProvider {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let cap = Capability::EmbedText;
        if texts.is_empty() {
            return Err(ProviderError::InvalidInput("embed_text: empty batch".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(ProviderError::InvalidInput(format!("embed_text: text {i} is empty")));
        }
        let resp: VectorsResponse = self.call(cap, json!({"model": self.endpoint.model_id, "texts": texts}))?;
        if resp.vectors.len() != texts.len() {
            return Err(Self::protocol(
                cap,
                format!("sent {} texts, received {} vectors", texts.len(), resp.vectors.len()),
            ));
        }
        let dim = resp.vectors[0].len();
        if dim == 0 {
            return Err(Self::protocol(cap, "zero-length vector"));
        }
        if let Some(i) = resp.vectors.iter().position(|v| v.len() != dim) {
            return Err(Self::protocol(
                cap,
                format!("vector {i} has dimension {} but vector 0 has {dim}", resp.vectors[i].len()),
            ));
        }
        let model = self.model_of(resp.model);
        Ok(resp
            .vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(model.clone(), v))
            .collect())
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector> {
        let cap = Capability::EmbedImage;
        if image_ref.is_empty() {
            return Err(ProviderError::InvalidInput("embed_image: empty image_ref".into()));
        }
        let body = match self.endpoint.image_transfer {
            ImageTransfer::Locator => json!({"model": self.endpoint.model_id, "image_ref": image_ref}),
            ImageTransfer::Bytes => {
                let bytes = std::fs::read(image_ref)
                    .map_err(|e| ProviderError::InvalidInput(format!("embed_image: reading {image_ref}: {e}")))?;
                json!({
                    "model": self.endpoint.model_id,
                    "image_ref": image_ref,
                    "image_b64": base64::engine::general_purpose::STANDARD.encode(bytes),
                })
            }
        };
        let resp: VectorResponse = self.call(cap, body)?;
        if resp.vector.is_empty() {
            return Err(ProviderError::Empty { route: cap.route().into() });
        }
        Ok(EmbeddingVector::new(self.model_of(resp.model), resp.vector))
    }

    fn caption_image(&self, image_ref: &str, prompt: &str) -> Result<String> {
        let cap = Capability::Caption;
        if prompt.is_empty() {
            return Err(ProviderError::InvalidInput("caption: empty prompt".into()));
        }
        let resp: TextResponse = self.call(
            cap,
            json!({"model": self.endpoint.model_id, "image_ref": image_ref, "prompt": prompt}),
        )?;
        match resp.text.map(|t| t.trim().to_string()) {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(ProviderError::Empty { route: cap.route().into() }),
        }
    }

    fn tag_image(&self, image_ref: &str, vocabulary: &[String]) -> Result<Vec<ScoredTag>> {
        let cap = Capability::Tag;
        if vocabulary.is_empty() {
            return Err(ProviderError::InvalidInput("tag: empty vocabulary".into()));
        }
        let resp: TagsResponse = self.call(
            cap,
            json!({"model": self.endpoint.model_id, "image_ref": image_ref, "vocabulary": vocabulary}),
        )?;
        if resp.tags.is_empty() {
            return Err(ProviderError::Empty { route: cap.route().into() });
        }
        let mut tags = resp.tags;
        for word in vocabulary {
            if !tags.iter().any(|t| &t.tag == word) {
                return Err(Self::protocol(cap, format!("no score for vocabulary entry {word:?}")));
            }
        }
        if let Some(t) = tags.iter().find(|t| !t.score.is_finite()) {
            return Err(Self::protocol(cap, format!("non-finite score for {:?}", t.tag)));
        }
        sort_tags(&mut tags);
        Ok(tags)
    }

    fn cross_score(&self, query: &str, docs: &[String]) -> Result<Vec<f64>> {
        let cap = Capability::CrossScore;
        if docs.is_empty() {
            return Err(ProviderError::InvalidInput("cross_score: no documents".into()));
        }
        let resp: ScoresResponse = self.call(
            cap,
            json!({"model": self.endpoint.model_id, "query": query, "docs": docs}),
        )?;
        if resp.scores.len() != docs.len() {
            return Err(Self::protocol(
                cap,
                format!("sent {} docs, received {} scores", docs.len(), resp.scores.len()),
            ));
        }
        Ok(resp.scores)
    }

    fn preprocess_query(&self, query: &str, prompt: &str) -> Result<Vec<String>> {
        let cap = Capability::Preprocess;
        if query.is_empty() {
            return Err(ProviderError::InvalidInput("preprocess: empty query".into()));
        }
        let resp: KeywordsResponse = self.call(
            cap,
            json!({"model": self.endpoint.model_id, "query": query, "prompt": prompt}),
        )?;
        let keywords = match resp.keywords {
            Some(Keywords::Raw(raw)) => parse_keywords(&raw),
            Some(Keywords::List(list)) => list
                .iter()
                .map(|k| k.trim())
                .filter(|k| !k.is_empty())
                .map(String::from)
                .collect(),
            None => Vec::new(),
        };
        if keywords.is_empty() {
            return Err(ProviderError::Empty { route: cap.route().into() });
        }
        Ok(keywords)
    }
}
