//! Deterministic in-process providers for tests and offline runs.
//!
//! Every output is a pure function of the inputs:
//! - text embedding: hashed character trigrams ([`text::trigram_embedding`])
//! - image embedding: SHA-256 of the locator in counter mode, normalized
//! - caption: `caption(<ref>|<first 8 hex of sha256(prompt)>)`
//! - tags: cosine between the trigram embeddings of tag and locator
//! - cross score: number of distinct shared normalized tokens
//! - preprocess: normalized tokens of the query

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::text;
use super::{Capability, Provider, ProviderError, ProviderIdentity, Result, ScoredTag};
use crate::hashing::sha256_hex;
use crate::rankers::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub dimension: usize,
    pub provider_id: String,
    pub model_id: String,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            dimension: 64,
            provider_id: "stub".into(),
            model_id: "stub-trigram-v1".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubProvider {
    config: StubConfig,
    identity: ProviderIdentity,
}

impl Default for StubProvider {
    fn default() -> Self {
        StubProvider::new(StubConfig::default())
    }
}

impl StubProvider {
    pub fn new(config: StubConfig) -> Self {
        let identity = ProviderIdentity {
            provider_id: config.provider_id.clone(),
            model_id: config.model_id.clone(),
        };
        StubProvider { config, identity }
    }

    fn text_vector(&self, text: &str, cap: Capability) -> Result<EmbeddingVector> {
        text::trigram_embedding(text, self.config.dimension)
            .map(|v| EmbeddingVector::new(self.identity.model_id.clone(), v))
            .ok_or_else(|| {
                ProviderError::InvalidInput(format!("{cap}: text {text:?} has no alphanumeric content"))
            })
    }
}

impl Provider for StubProvider {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidInput("embed_text: empty batch".into()));
        }
        texts
            .iter()
            .map(|t| self.text_vector(t, Capability::EmbedText))
            .collect()
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector> {
        if image_ref.is_empty() {
            return Err(ProviderError::InvalidInput("embed_image: empty image_ref".into()));
        }
        let dim = self.config.dimension;
        let mut values = Vec::with_capacity(dim);
        let mut block = 0u64;
        while values.len() < dim {
            let mut h = Sha256::new();
            h.update(image_ref.as_bytes());
            h.update(block.to_le_bytes());
            let digest = h.finalize();
            for chunk in digest.chunks_exact(8) {
                if values.len() == dim {
                    break;
                }
                let x = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                values.push((x >> 11) as f64 / (1u64 << 52) as f64 - 1.0);
            }
            block += 1;
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        values.iter_mut().for_each(|x| *x /= norm);
        Ok(EmbeddingVector::new(self.identity.model_id.clone(), values))
    }

    fn caption_image(&self, image_ref: &str, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(ProviderError::InvalidInput("caption: empty prompt".into()));
        }
        Ok(format!("caption({image_ref}|{})", &sha256_hex(prompt.as_bytes())[..8]))
    }

    fn tag_image(&self, image_ref: &str, vocabulary: &[String]) -> Result<Vec<ScoredTag>> {
        if vocabulary.is_empty() {
            return Err(ProviderError::InvalidInput("tag: empty vocabulary".into()));
        }
        let image = text::trigram_embedding(image_ref, self.config.dimension);
        let mut tags: Vec<ScoredTag> = vocabulary
            .iter()
            .map(|tag| {
                let score = match (&image, text::trigram_embedding(tag, self.config.dimension)) {
                    (Some(i), Some(t)) => i.iter().zip(&t).map(|(a, b)| a * b).sum(),
                    _ => 0.0,
                };
                ScoredTag {
                    tag: tag.clone(),
                    score,
                }
            })
            .collect();
        super::sort_tags(&mut tags);
        Ok(tags)
    }

    fn cross_score(&self, query: &str, docs: &[String]) -> Result<Vec<f64>> {
        if docs.is_empty() {
            return Err(ProviderError::InvalidInput("cross_score: no documents".into()));
        }
        let q: BTreeSet<String> = text::tokens(query).into_iter().collect();
        Ok(docs
            .iter()
            .map(|d| {
                let d: BTreeSet<String> = text::tokens(d).into_iter().collect();
                q.intersection(&d).count() as f64
            })
            .collect())
    }

    fn preprocess_query(&self, query: &str, _prompt: &str) -> Result<Vec<String>> {
        if query.is_empty() {
            return Err(ProviderError::InvalidInput("preprocess: empty query".into()));
        }
        let toks = text::tokens(query);
        if toks.is_empty() {
            return Err(ProviderError::Empty {
                route: Capability::Preprocess.route().into(),
            });
        }
        Ok(toks)
    }
}
