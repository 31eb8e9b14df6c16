//! nDCG and multi-run aggregation.
//!
//! `DCG_k = sum_{i=1..k} gain_i / log2(i + 1)` with 1-indexed positions,
//! `nDCG_k = DCG_k / IDCG_k` where IDCG uses the same gains sorted
//! descending. Queries whose IDCG is zero are skipped rather than scored.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::catalog::{EsciLabel, JudgmentSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("gain list is empty")]
    EmptyGains,
    #[error("query {query_id:?}: ranked product {product_id:?} has no judgment")]
    MissingJudgment { query_id: String, product_id: String },
    #[error("query {query_id:?}: product {product_id:?} ranked twice")]
    DuplicateItem { query_id: String, product_id: String },
    #[error("query {query_id:?}: non-finite score for {product_id:?}")]
    NonFiniteScore { query_id: String, product_id: String },
    #[error("invalid gain scheme: {0}")]
    InvalidGainScheme(String),
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("run {run} covers a different query set than run 0")]
    MismatchedQuerySets { run: usize },
    #[error("every query in run {run} was skipped")]
    NothingToScore { run: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Gain per ESCI label. Must be non-increasing from E to I, non-negative,
/// and not all zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainSchemeRepr", into = "GainSchemeRepr")]
pub struct GainScheme {
    gains: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct GainSchemeRepr {
    #[serde(rename = "E")]
    e: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "C")]
    c: f64,
    #[serde(rename = "I")]
    i: f64,
}

impl TryFrom<GainSchemeRepr> for GainScheme {
    type Error = MetricError;

    fn try_from(r: GainSchemeRepr) -> Result<Self> {
        GainScheme::new([r.e, r.s, r.c, r.i])
    }
}

impl From<GainScheme> for GainSchemeRepr {
    fn from(g: GainScheme) -> Self {
        let [e, s, c, i] = g.gains;
        GainSchemeRepr { e, s, c, i }
    }
}

impl Default for GainScheme {
    fn default() -> Self {
        GainScheme {
            gains: [1.0, 0.1, 0.01, 0.0],
        }
    }
}

impl GainScheme {
    /// Gains in `[E, S, C, I]` order.
    pub fn new(gains: [f64; 4]) -> Result<Self> {
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(MetricError::InvalidGainScheme(format!(
                "gains must be finite and non-negative, got {gains:?}"
            )));
        }
        if gains.windows(2).any(|w| w[0] < w[1]) {
            return Err(MetricError::InvalidGainScheme(format!(
                "gains must be non-increasing E >= S >= C >= I, got {gains:?}"
            )));
        }
        if gains[0] <= 0.0 {
            return Err(MetricError::InvalidGainScheme("at least one gain must be positive".into()));
        }
        Ok(GainScheme { gains })
    }

    pub fn gain(&self, label: EsciLabel) -> f64 {
        self.gains[label.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.gains
    }
}

/// How many leading positions count toward DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KPolicy {
    /// The whole ranking.
    #[default]
    Full,
    Cutoff(usize),
}

impl KPolicy {
    fn resolve(self, len: usize) -> usize {
        match self {
            KPolicy::Full => len,
            KPolicy::Cutoff(k) => k,
        }
    }
}

impl fmt::Display for KPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KPolicy::Full => f.write_str("full"),
            KPolicy::Cutoff(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KPolicy::Full => s.serialize_str("full"),
            KPolicy::Cutoff(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(0) => Err(serde::de::Error::custom("k must be at least 1")),
            Repr::Num(k) => Ok(KPolicy::Cutoff(k as usize)),
            Repr::Text(t) if t.eq_ignore_ascii_case("full") => Ok(KPolicy::Full),
            Repr::Text(t) => t
                .parse::<usize>()
                .ok()
                .filter(|k| *k > 0)
                .map(KPolicy::Cutoff)
                .ok_or_else(|| serde::de::Error::custom(format!("bad k {t:?}"))),
        }
    }
}

/// Discounted cumulative gain over the first `min(k, len)` positions.
pub fn dcg(gains: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    if gains.is_empty() {
        return Err(MetricError::EmptyGains);
    }
    Ok(gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum())
}

/// DCG of the gains sorted descending.
pub fn idcg(gains: &[f64], k: usize) -> Result<f64> {
    let mut sorted = gains.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    dcg(&sorted, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub product_id: String,
    pub score: f64,
}

/// A query's examples, best first. Ordering is non-increasing in score,
/// ties broken by ascending `product_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub items: Vec<RankedItem>,
}

impl Ranking {
    /// Sort scored products into a ranking.
    pub fn from_scores(query_id: impl Into<String>, scored: Vec<(String, f64)>) -> Result<Self> {
        let query_id = query_id.into();
        if let Some((pid, _)) = scored.iter().find(|(_, s)| !s.is_finite()) {
            return Err(MetricError::NonFiniteScore {
                query_id,
                product_id: pid.clone(),
            });
        }
        let mut items: Vec<RankedItem> = scored
            .into_iter()
            .map(|(product_id, score)| RankedItem { product_id, score })
            .collect();
        items.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.product_id.cmp(&b.product_id))
        });
        if let Some(w) = items.windows(2).find(|w| w[0].product_id == w[1].product_id) {
            return Err(MetricError::DuplicateItem {
                query_id,
                product_id: w[0].product_id.clone(),
            });
        }
        Ok(Ranking { query_id, items })
    }

    /// Rank in the given order; scores are synthesized as `len - position`.
    pub fn from_order(query_id: impl Into<String>, order: Vec<String>) -> Result<Self> {
        let n = order.len();
        let scored = order
            .into_iter()
            .enumerate()
            .map(|(i, p)| (p, (n - i) as f64))
            .collect();
        Ranking::from_scores(query_id, scored)
    }

    pub fn product_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.product_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-query evaluation result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum QueryOutcome {
    Scored { ndcg: f64, items: usize },
    /// IDCG was zero: no positive gain among the query's examples.
    Skipped { items: usize },
}

impl QueryOutcome {
    pub fn ndcg(&self) -> Option<f64> {
        match self {
            QueryOutcome::Scored { ndcg, .. } => Some(*ndcg),
            QueryOutcome::Skipped { .. } => None,
        }
    }
}

/// nDCG of `ranking` against the query's judgments.
pub fn ndcg(
    ranking: &Ranking,
    judgments: &JudgmentSet,
    scheme: &GainScheme,
    k: KPolicy,
) -> Result<QueryOutcome> {
    let gains = ranking
        .items
        .iter()
        .map(|item| {
            judgments
                .label_of(&ranking.query_id, &item.product_id)
                .map(|l| scheme.gain(l))
                .ok_or_else(|| MetricError::MissingJudgment {
                    query_id: ranking.query_id.clone(),
                    product_id: item.product_id.clone(),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    ndcg_of_gains(&gains, k)
}

/// nDCG of an ordered gain list.
pub fn ndcg_of_gains(gains: &[f64], k: KPolicy) -> Result<QueryOutcome> {
    let k = k.resolve(gains.len());
    let ideal = idcg(gains, k)?;
    if ideal <= 0.0 {
        return Ok(QueryOutcome::Skipped { items: gains.len() });
    }
    let actual = dcg(gains, k)?;
    Ok(QueryOutcome::Scored {
        ndcg: (actual / ideal).clamp(0.0, 1.0),
        items: gains.len(),
    })
}

/// How per-query scores combine into a dataset score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Unweighted,
    /// Weight each query by its number of ranked examples.
    ByExampleCount,
}

/// One run's per-query outcomes keyed by query id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub per_query: BTreeMap<String, QueryOutcome>,
}

impl RunScores {
    pub fn skipped(&self) -> usize {
        self.per_query
            .values()
            .filter(|o| matches!(o, QueryOutcome::Skipped { .. }))
            .count()
    }

    pub fn scored(&self) -> usize {
        self.per_query.len() - self.skipped()
    }

    /// Mean over non-skipped queries, or `None` if every query was skipped.
    pub fn dataset_score(&self, weighting: Weighting) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for outcome in self.per_query.values() {
            if let QueryOutcome::Scored { ndcg, items } = outcome {
                let w = match weighting {
                    Weighting::Unweighted => 1.0,
                    Weighting::ByExampleCount => *items as f64,
                };
                num += w * ndcg;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    }
}

impl FromIterator<(String, QueryOutcome)> for RunScores {
    fn from_iter<I: IntoIterator<Item = (String, QueryOutcome)>>(iter: I) -> Self {
        RunScores {
            per_query: iter.into_iter().collect(),
        }
    }
}

/// Dataset-level statistics across independent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
    pub run_scores: Vec<f64>,
    /// Skipped queries per run (largest across runs).
    pub skipped_queries: usize,
    pub scored_queries: usize,
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Summarize dataset scores that were already computed per run.
pub fn summarize_scores(run_scores: Vec<f64>, skipped: usize, scored: usize) -> Result<EvalSummary> {
    if run_scores.is_empty() {
        return Err(MetricError::NoRuns);
    }
    let n = run_scores.len() as f64;
    let mean = run_scores.iter().sum::<f64>() / n;
    let min = run_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = run_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(EvalSummary {
        mean: mean.clamp(min, max),
        median: median(&run_scores).expect("non-empty"),
        min,
        max,
        runs: run_scores.len(),
        run_scores,
        skipped_queries: skipped,
        scored_queries: scored,
    })
}

/// Aggregate per-query outcomes from several runs over the same query set.
pub fn aggregate_runs(runs: &[RunScores], weighting: Weighting) -> Result<EvalSummary> {
    let first = runs.first().ok_or(MetricError::NoRuns)?;
    let mut scores = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        if !run.per_query.keys().eq(first.per_query.keys()) {
            return Err(MetricError::MismatchedQuerySets { run: i });
        }
        scores.push(
            run.dataset_score(weighting)
                .ok_or(MetricError::NothingToScore { run: i })?,
        );
    }
    let skipped = runs.iter().map(RunScores::skipped).max().unwrap_or(0);
    let scored = runs.iter().map(RunScores::scored).min().unwrap_or(0);
    summarize_scores(scores, skipped, scored)
}
