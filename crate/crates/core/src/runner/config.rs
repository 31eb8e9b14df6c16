//! Experiment configuration: one TOML document, every value defaulted except
//! the dataset paths.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::enrichment::{CompositionMode, DEFAULT_CHAR_CAP, DEFAULT_EMBED_BATCH};
use crate::metrics::{GainScheme, KPolicy, Weighting};
use crate::par::ExecMode;
use crate::provider::ProviderSpec;
use crate::rankers::PopularityScheme;

/// A ranking strategy evaluated as one row of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Random,
    /// Popularity with `[1, 0, 0, 0]` label weights.
    MostPopular,
    /// Popularity with `[1, 1, 1, 0]`.
    MostPopularNonIrrelevant,
    /// Popularity with `[1.0, 0.1, 0.01, 0.0]`.
    MostPopularDecreasing,
    Text,
    ImgGen,
    TextPlusImgGen,
    ImgDirect,
    /// Embedding similarity over `similarity_composition` documents.
    BiEncoder,
    /// Pairwise cross scoring over `similarity_composition` documents.
    CrossEncoder,
}

impl Approach {
    pub const ALL: [Approach; 10] = [
        Approach::Random,
        Approach::MostPopular,
        Approach::MostPopularNonIrrelevant,
        Approach::MostPopularDecreasing,
        Approach::Text,
        Approach::ImgGen,
        Approach::TextPlusImgGen,
        Approach::ImgDirect,
        Approach::BiEncoder,
        Approach::CrossEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Random => "random",
            Approach::MostPopular => "most_popular",
            Approach::MostPopularNonIrrelevant => "most_popular_non_irrelevant",
            Approach::MostPopularDecreasing => "most_popular_decreasing",
            Approach::Text => "text",
            Approach::ImgGen => "img_gen",
            Approach::TextPlusImgGen => "text_plus_img_gen",
            Approach::ImgDirect => "img_direct",
            Approach::BiEncoder => "bi_encoder",
            Approach::CrossEncoder => "cross_encoder",
        }
    }

    pub fn popularity_scheme(self) -> Option<PopularityScheme> {
        match self {
            Approach::MostPopular => Some(PopularityScheme::Exact),
            Approach::MostPopularNonIrrelevant => Some(PopularityScheme::NonIrrelevant),
            Approach::MostPopularDecreasing => Some(PopularityScheme::Decreasing),
            _ => None,
        }
    }

    /// Document composition this approach ranks over, if any.
    pub fn composition(self, similarity: CompositionMode) -> Option<CompositionMode> {
        match self {
            Approach::Text => Some(CompositionMode::Text),
            Approach::ImgGen => Some(CompositionMode::ImgGen),
            Approach::TextPlusImgGen => Some(CompositionMode::TextPlusImgGen),
            Approach::ImgDirect => Some(CompositionMode::ImgDirect),
            Approach::BiEncoder | Approach::CrossEncoder => Some(similarity),
            _ => None,
        }
    }

    /// Whether ranking compares query and document embeddings.
    pub fn uses_embeddings(self) -> bool {
        matches!(
            self,
            Approach::Text | Approach::ImgGen | Approach::TextPlusImgGen | Approach::ImgDirect | Approach::BiEncoder
        )
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approach {
    type Err = RunnerError;

    fn from_str(s: &str) -> Result<Self, RunnerError> {
        Approach::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| RunnerError::Config(format!("unknown approach {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    Test,
    Train,
    All,
}

/// Which catalog padding samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadSource {
    /// The catalog left after popularity filtering.
    #[default]
    Filtered,
    /// The full ingested catalog.
    Full,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataPaths {
    pub products: PathBuf,
    pub queries: PathBuf,
    pub judgments: PathBuf,
    /// Fraction of queries assigned to train when judgments carry no split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl DataPaths {
    /// `products`, `queries` and `judgments` files with extension `ext` in `dir`.
    pub fn in_dir(dir: &Path, ext: &str) -> Self {
        DataPaths {
            products: dir.join(format!("products.{ext}")),
            queries: dir.join(format!("queries.{ext}")),
            judgments: dir.join(format!("judgments.{ext}")),
            train_fraction: default_train_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichmentSettings {
    /// Named-prompt JSONL file; built-in prompts when absent.
    pub prompts: Option<PathBuf>,
    /// Tag vocabulary, one per line; a small built-in list when absent.
    pub vocabulary: Option<PathBuf>,
    pub top_k_tags: usize,
    pub max_in_flight: usize,
    pub failure_threshold: f64,
    pub embed_batch: usize,
}

impl Default for EnrichmentSettings {
    fn default() -> Self {
        EnrichmentSettings {
            prompts: None,
            vocabulary: None,
            top_k_tags: 5,
            max_in_flight: 4,
            failure_threshold: 0.05,
            embed_batch: DEFAULT_EMBED_BATCH,
        }
    }
}

/// Provider per capability, so e.g. a real captioner can pair with stub embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    /// Requests in flight across all providers.
    pub max_in_flight: usize,
    pub embed_text: ProviderSpec,
    pub embed_image: ProviderSpec,
    pub caption: ProviderSpec,
    pub tag: ProviderSpec,
    pub cross_score: ProviderSpec,
    pub preprocess: ProviderSpec,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        ProviderSettings {
            max_in_flight: 8,
            embed_text: ProviderSpec::default(),
            embed_image: ProviderSpec::default(),
            caption: ProviderSpec::default(),
            tag: ProviderSpec::default(),
            cross_score: ProviderSpec::default(),
            preprocess: ProviderSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    #[serde(default = "defaults::min_occurrences")]
    pub min_occurrences: usize,
    #[serde(default = "defaults::pad_sizes")]
    pub pad_sizes: Vec<usize>,
    #[serde(default = "defaults::approaches")]
    pub approaches: Vec<Approach>,
    #[serde(default = "defaults::runs")]
    pub runs: usize,
    /// Orderings per run for the random baseline; the run scores their median.
    #[serde(default = "defaults::random_orderings")]
    pub random_orderings: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gain_scheme: GainScheme,
    #[serde(default)]
    pub k: KPolicy,
    #[serde(default)]
    pub weighting: Weighting,
    /// Query-side variants: raw text (`false`) and/or preprocessed keywords (`true`).
    #[serde(default = "defaults::preprocessing")]
    pub preprocessing: Vec<bool>,
    #[serde(default = "defaults::char_cap")]
    pub char_cap: usize,
    /// Documents used by `bi_encoder` and `cross_encoder`.
    #[serde(default = "defaults::similarity_composition")]
    pub similarity_composition: CompositionMode,
    #[serde(default)]
    pub eval_split: EvalSplit,
    #[serde(default)]
    pub pad_source: PadSource,
    /// Draw fresh padding for every run; `false` pins run 0's padding.
    #[serde(default = "defaults::yes")]
    pub resample_padding: bool,
    /// Worker threads for per-query work; 1 forces sequential execution.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    /// Persistent provider-output cache; in-memory when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub enrichment: EnrichmentSettings,
    #[serde(default)]
    pub providers: ProviderSettings,
}

mod defaults {
    use super::*;

    pub fn min_occurrences() -> usize {
        3
    }
    pub fn pad_sizes() -> Vec<usize> {
        vec![0, 5, 10, 20]
    }
    pub fn approaches() -> Vec<Approach> {
        vec![Approach::Random, Approach::MostPopular, Approach::Text]
    }
    pub fn runs() -> usize {
        4
    }
    pub fn random_orderings() -> usize {
        5
    }
    pub fn preprocessing() -> Vec<bool> {
        vec![false]
    }
    pub fn char_cap() -> usize {
        DEFAULT_CHAR_CAP
    }
    pub fn similarity_composition() -> CompositionMode {
        CompositionMode::Text
    }
    pub fn yes() -> bool {
        true
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

fn distinct<T: Ord>(items: &[T]) -> bool {
    items.iter().collect::<BTreeSet<_>>().len() == items.len()
}

impl ExperimentConfig {
    /// Defaults for everything but the dataset paths.
    pub fn new(data: DataPaths) -> Self {
        ExperimentConfig {
            data,
            min_occurrences: defaults::min_occurrences(),
            pad_sizes: defaults::pad_sizes(),
            approaches: defaults::approaches(),
            runs: defaults::runs(),
            random_orderings: defaults::random_orderings(),
            seed: 0,
            gain_scheme: GainScheme::default(),
            k: KPolicy::default(),
            weighting: Weighting::default(),
            preprocessing: defaults::preprocessing(),
            char_cap: defaults::char_cap(),
            similarity_composition: defaults::similarity_composition(),
            eval_split: EvalSplit::default(),
            pad_source: PadSource::default(),
            resample_padding: true,
            jobs: None,
            output_dir: defaults::output_dir(),
            cache_dir: None,
            enrichment: EnrichmentSettings::default(),
            providers: ProviderSettings::default(),
        }
    }

    pub fn from_toml_str(raw: &str) -> Result<Self, RunnerError> {
        let config: ExperimentConfig = toml::from_str(raw).map_err(|e| RunnerError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&raw).map_err(|e| match e {
            RunnerError::Config(m) => RunnerError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// The configuration recorded in reports: execution-only settings
    /// (worker count, output directory) are reset to their defaults, since
    /// they never change results.
    pub fn snapshot(&self) -> Self {
        ExperimentConfig {
            jobs: None,
            output_dir: defaults::output_dir(),
            ..self.clone()
        }
    }

    pub fn exec_mode(&self) -> ExecMode {
        match self.jobs {
            Some(1) => ExecMode::Sequential,
            _ => ExecMode::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let fail = |m: &str| Err(RunnerError::Config(m.to_string()));
        if self.runs == 0 {
            return fail("runs must be >= 1");
        }
        if self.random_orderings == 0 {
            return fail("random_orderings must be >= 1");
        }
        if self.min_occurrences == 0 {
            return fail("min_occurrences must be >= 1");
        }
        if self.pad_sizes.is_empty() || !distinct(&self.pad_sizes) {
            return fail("pad_sizes must be a non-empty list of distinct values");
        }
        if self.approaches.is_empty() || !distinct(&self.approaches) {
            return fail("approaches must be a non-empty list of distinct values");
        }
        if self.preprocessing.is_empty() || !distinct(&self.preprocessing) {
            return fail("preprocessing must be a non-empty list of distinct flags");
        }
        if self.char_cap == 0 {
            return fail("char_cap must be >= 1");
        }
        if self.jobs == Some(0) {
            return fail("jobs must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.enrichment.failure_threshold) {
            return fail("enrichment.failure_threshold must lie in [0, 1]");
        }
        if self.enrichment.embed_batch == 0 || self.enrichment.max_in_flight == 0 || self.providers.max_in_flight == 0 {
            return fail("batch sizes and in-flight limits must be >= 1");
        }
        if !(0.0..1.0).contains(&self.data.train_fraction) && self.data.train_fraction != 1.0 {
            return fail("data.train_fraction must lie in [0, 1]");
        }
        let pairwise = self
            .approaches
            .iter()
            .any(|a| matches!(a, Approach::BiEncoder | Approach::CrossEncoder));
        if pairwise && self.similarity_composition == CompositionMode::ImgDirect {
            return fail("similarity_composition cannot be img_direct: bi/cross encoders need documents");
        }
        let specs = [
            &self.providers.embed_text,
            &self.providers.embed_image,
            &self.providers.caption,
            &self.providers.tag,
            &self.providers.cross_score,
            &self.providers.preprocess,
        ];
        for spec in specs {
            if let ProviderSpec::Http(ep) = spec {
                ep.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
            }
            if let ProviderSpec::Stub(s) = spec {
                if s.dimension == 0 {
                    return fail("stub dimension must be >= 1");
                }
            }
        }
        Ok(())
    }
}
