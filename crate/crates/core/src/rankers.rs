//! Ranking strategies: random and most-popular baselines, embedding
//! cosine similarity, and pairwise cross scoring.
//!
//! Every ranker returns a permutation of exactly the examples it was given.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::catalog::{Judgment, Origin, Split};
use crate::hashing;
use crate::metrics::{MetricError, Ranking};
use crate::provider::{Provider, ProviderError};

#[derive(Debug, thiserror::Error)]
pub enum RankError {
    #[error("zero-norm embedding from model {model_id:?}; cosine is undefined")]
    ZeroVector { model_id: String },
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embeddings from different models: {left:?} vs {right:?}")]
    ModelMismatch { left: String, right: String },
    #[error("no original train judgments to fit popularity on")]
    EmptyTrainSplit,
    #[error("query {query_id:?}: scorer returned {got} scores for {expected} documents")]
    ScoreCount {
        query_id: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, RankError>;

/// A dense embedding tagged with the model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f64>) -> Self {
        EmbeddingVector {
            model_id: model_id.into(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|x| *x == 0.0)
    }

    /// Scale to unit L2 norm.
    pub fn normalized(&self) -> Result<UnitVector> {
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RankError::ZeroVector {
                model_id: self.model_id.clone(),
            });
        }
        Ok(UnitVector {
            model_id: self.model_id.clone(),
            values: self.values.iter().map(|x| x / norm).collect(),
        })
    }
}

/// An L2-normalized embedding; cosine similarity is a dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    model_id: String,
    values: Vec<f64>,
}

impl UnitVector {
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &UnitVector) -> Result<f64> {
        check_compatible(&self.model_id, self.values.len(), &other.model_id, other.values.len())?;
        Ok(dot(&self.values, &other.values))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_compatible(lm: &str, ld: usize, rm: &str, rd: usize) -> Result<()> {
    if lm != rm {
        return Err(RankError::ModelMismatch {
            left: lm.to_string(),
            right: rm.to_string(),
        });
    }
    if ld != rd {
        return Err(RankError::DimensionMismatch { left: ld, right: rd });
    }
    Ok(())
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    check_compatible(&u.model_id, u.dim(), &v.model_id, v.dim())?;
    let (nu, nv) = (u.norm(), v.norm());
    for (n, e) in [(nu, u), (nv, v)] {
        if n == 0.0 {
            return Err(RankError::ZeroVector {
                model_id: e.model_id.clone(),
            });
        }
    }
    Ok((dot(&u.values, &v.values) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Uniformly random permutation of `examples`, fixed by `(seed, query_id)`.
pub fn rank_random(query_id: &str, examples: &[String], seed: u64) -> Ranking {
    let mut order = examples.to_vec();
    order.sort();
    let mut rng = hashing::substream(seed, &["random", query_id]);
    order.shuffle(&mut rng);
    Ranking::from_order(query_id, order).expect("examples are distinct")
}

/// Label weights applied to `[E, S, C, I]` occurrence counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PopularityScheme {
    /// Count of exact matches: `[1, 0, 0, 0]`.
    #[default]
    Exact,
    /// Count of non-irrelevant matches: `[1, 1, 1, 0]`.
    NonIrrelevant,
    /// Decreasing weights `[1.0, 0.1, 0.01, 0.0]`.
    Decreasing,
    Custom([f64; 4]),
}

impl PopularityScheme {
    pub fn weights(self) -> [f64; 4] {
        match self {
            PopularityScheme::Exact => [1.0, 0.0, 0.0, 0.0],
            PopularityScheme::NonIrrelevant => [1.0, 1.0, 1.0, 0.0],
            PopularityScheme::Decreasing => [1.0, 0.1, 0.01, 0.0],
            PopularityScheme::Custom(w) => w,
        }
    }

    pub fn name(self) -> String {
        match self {
            PopularityScheme::Exact => "exact".into(),
            PopularityScheme::NonIrrelevant => "non_irrelevant".into(),
            PopularityScheme::Decreasing => "decreasing".into(),
            PopularityScheme::Custom(w) => format!("custom{w:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityModel {
    pub weights: [f64; 4],
    pub scores: BTreeMap<String, f64>,
}

impl PopularityModel {
    /// Products never seen in training score 0.
    pub fn score(&self, product_id: &str) -> f64 {
        self.scores.get(product_id).copied().unwrap_or(0.0)
    }
}

/// Sum label weights over each product's original train judgments.
pub fn fit_popularity<'a, I>(judgments: I, scheme: PopularityScheme) -> Result<PopularityModel>
where
    I: IntoIterator<Item = &'a Judgment>,
{
    let weights = scheme.weights();
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    let mut seen = 0usize;
    for j in judgments {
        if j.split != Split::Train || j.origin != Origin::Original {
            continue;
        }
        seen += 1;
        *scores.entry(j.product_id.clone()).or_default() += weights[j.label.index()];
    }
    if seen == 0 {
        return Err(RankError::EmptyTrainSplit);
    }
    Ok(PopularityModel { weights, scores })
}

pub fn rank_most_popular(model: &PopularityModel, query_id: &str, examples: &[String]) -> Ranking {
    let scored = examples
        .iter()
        .map(|p| (p.clone(), model.score(p)))
        .collect();
    Ranking::from_scores(query_id, scored).expect("examples are distinct and scores finite")
}

/// Rank by cosine similarity of each example vector to the query vector.
pub fn rank_by_similarity(
    query_id: &str,
    query: &EmbeddingVector,
    examples: &[(String, EmbeddingVector)],
) -> Result<Ranking> {
    let q = query.normalized()?;
    let units = examples
        .iter()
        .map(|(p, v)| Ok((p.clone(), v.normalized()?)))
        .collect::<Result<Vec<_>>>()?;
    rank_by_unit_similarity(query_id, &q, units.iter().map(|(p, v)| (p.as_str(), v)))
}

/// As [`rank_by_similarity`] over vectors normalized up front.
pub fn rank_by_unit_similarity<'a, I>(query_id: &str, query: &UnitVector, examples: I) -> Result<Ranking>
where
    I: IntoIterator<Item = (&'a str, &'a UnitVector)>,
{
    let scored = examples
        .into_iter()
        .map(|(p, v)| Ok((p.to_string(), query.dot(v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_scores(query_id, scored)?)
}

/// Score `(query, document)` pairs with a cross scorer and rank by score.
/// `docs` pairs each product id with its document text.
pub fn rank_by_cross_scores(
    query_id: &str,
    query_text: &str,
    docs: &[(String, String)],
    scorer: &dyn Provider,
) -> Result<Ranking> {
    let texts: Vec<String> = docs.iter().map(|(_, d)| d.clone()).collect();
    let scores = scorer.cross_score(query_text, &texts)?;
    if scores.len() != docs.len() {
        return Err(RankError::ScoreCount {
            query_id: query_id.to_string(),
            expected: docs.len(),
            got: scores.len(),
        });
    }
    let scored = docs
        .iter()
        .zip(scores)
        .map(|((p, _), s)| (p.clone(), s))
        .collect();
    Ok(Ranking::from_scores(query_id, scored)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::EsciLabel;
    use crate::provider::stub::StubProvider;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn ids(r: &Ranking) -> Vec<&str> {
        r.product_ids().collect()
    }

    fn ex(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn random_single_and_deterministic() {
        assert_eq!(ids(&rank_random("q", &ex(&["only"]), 5)), vec!["only"]);
        let items = ex(&["a", "b", "c", "d", "e", "f"]);
        assert_eq!(rank_random("q", &items, 11), rank_random("q", &items, 11));
        let mut shuffled = items.clone();
        shuffled.reverse();
        assert_eq!(rank_random("q", &items, 11), rank_random("q", &shuffled, 11));
    }

    #[test]
    fn random_is_uniform_over_three_items() {
        // Each of the 6 orderings should land within 3 sigma of 1000/6000.
        let items = ex(&["a", "b", "c"]);
        let trials = 6000u64;
        let mut counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for seed in 0..trials {
            let r = rank_random("q", &items, seed);
            *counts.entry(r.product_ids().map(String::from).collect()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let expected = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (perm, c) in counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "{perm:?} observed {c}, expected {expected:.0} +- {:.0}",
                3.0 * sigma
            );
        }
    }

    fn train(product: &str, label: EsciLabel) -> Judgment {
        Judgment::original(format!("q-{product}-{label}-{}", rand_tag()), product, label, Split::Train)
    }

    fn rand_tag() -> usize {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static N: AtomicUsize = AtomicUsize::new(0);
        N.fetch_add(1, Ordering::Relaxed)
    }

    #[test]
    fn popularity_schemes() {
        use EsciLabel::*;
        let js = vec![train("P", Exact), train("P", Exact), train("P", Substitute)];
        let exact = fit_popularity(&js, PopularityScheme::Exact).unwrap();
        let non_i = fit_popularity(&js, PopularityScheme::NonIrrelevant).unwrap();
        let dec = fit_popularity(&js, PopularityScheme::Decreasing).unwrap();
        assert_eq!(exact.score("P"), 2.0);
        assert_eq!(non_i.score("P"), 3.0);
        assert!((dec.score("P") - 2.1).abs() < 1e-12);
        assert_eq!(exact.score("unseen"), 0.0);
    }

    #[test]
    fn popularity_ignores_test_and_padded() {
        use EsciLabel::*;
        let mut js = vec![
            Judgment::original("q1", "P", Exact, Split::Test),
            Judgment::original("q2", "Q", Exact, Split::Train),
        ];
        let mut padded = Judgment::original("q3", "P", Irrelevant, Split::Train);
        padded.origin = Origin::Padded;
        js.push(padded);
        let m = fit_popularity(&js, PopularityScheme::NonIrrelevant).unwrap();
        assert_eq!(m.score("P"), 0.0);
        assert_eq!(m.score("Q"), 1.0);
        let only_test = vec![Judgment::original("q1", "P", Exact, Split::Test)];
        assert!(matches!(
            fit_popularity(&only_test, PopularityScheme::Exact),
            Err(RankError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn most_popular_ordering() {
        let model = PopularityModel {
            weights: [1.0, 0.0, 0.0, 0.0],
            scores: [("A".to_string(), 2.0), ("B".to_string(), 0.0), ("C".to_string(), 5.0)]
                .into_iter()
                .collect(),
        };
        assert_eq!(ids(&rank_most_popular(&model, "q", &ex(&["A", "B", "C"]))), vec!["C", "A", "B"]);
        assert_eq!(
            ids(&rank_most_popular(&model, "q", &ex(&["z", "x", "y"]))),
            vec!["x", "y", "z"]
        );
    }

    #[test]
    fn zero_scheme_degenerates_to_id_order() {
        use EsciLabel::*;
        let js = vec![train("B", Exact), train("A", Substitute)];
        let m = fit_popularity(&js, PopularityScheme::Custom([0.0; 4])).unwrap();
        assert_eq!(ids(&rank_most_popular(&m, "q", &ex(&["B", "C", "A"]))), vec!["A", "B", "C"]);
    }

    #[test]
    fn cosine_examples() {
        let v = |x: &[f64]| EmbeddingVector::new("m", x.to_vec());
        assert!((cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-9);
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(RankError::ZeroVector { .. })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(RankError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &EmbeddingVector::new("other", vec![1.0])),
            Err(RankError::ModelMismatch { .. })
        ));
    }

    #[test]
    fn similarity_ranking() {
        let v = |x: &[f64]| EmbeddingVector::new("m", x.to_vec());
        let q = v(&[1.0, 0.0, 0.0]);
        let items = vec![
            ("far".to_string(), v(&[0.0, 1.0, 0.0])),
            ("same".to_string(), v(&[1.0, 0.0, 0.0])),
            ("twin-b".to_string(), v(&[1.0, 1.0, 0.0])),
            ("twin-a".to_string(), v(&[1.0, 1.0, 0.0])),
        ];
        let r = rank_by_similarity("q", &q, &items).unwrap();
        assert_eq!(ids(&r), vec!["same", "twin-a", "twin-b", "far"]);
    }

    #[test]
    fn stub_embedding_puts_duplicate_text_first() {
        let stub = StubProvider::default();
        let texts = ex(&["water bottle steel", "red dress", "blue denim jacket"]);
        let vectors = stub.embed_texts(&texts).unwrap();
        let query = stub.embed_texts(&ex(&["red dress"])).unwrap().remove(0);
        let items: Vec<(String, EmbeddingVector)> = ["P1", "P2", "P3"]
            .iter()
            .map(|s| s.to_string())
            .zip(vectors)
            .collect();
        assert_eq!(ids(&rank_by_similarity("q", &query, &items).unwrap())[0], "P2");
    }

    #[test]
    fn cross_score_ranking() {
        let stub = StubProvider::default();
        let docs = vec![
            ("bottle".to_string(), "water bottle".to_string()),
            ("shirt".to_string(), "red dress shirt".to_string()),
        ];
        let r = rank_by_cross_scores("q", "red dress", &docs, &stub).unwrap();
        assert_eq!(ids(&r), vec!["shirt", "bottle"]);
        let single = rank_by_cross_scores("q", "x", &docs[..1], &stub).unwrap();
        assert_eq!(ids(&single), vec!["bottle"]);
        let equal = vec![
            ("b".to_string(), "zzz".to_string()),
            ("a".to_string(), "yyy".to_string()),
        ];
        assert_eq!(ids(&rank_by_cross_scores("q", "red", &equal, &stub).unwrap()), vec!["a", "b"]);
    }

    fn distinct_cosines(q: &[f64], items: &[Vec<f64>]) -> bool {
        let qv = EmbeddingVector::new("m", q.to_vec());
        let mut sims: Vec<f64> = items
            .iter()
            .map(|v| cosine_similarity(&qv, &EmbeddingVector::new("m", v.clone())).unwrap())
            .collect();
        sims.sort_by(f64::total_cmp);
        sims.windows(2).all(|w| w[1] - w[0] > 1e-9)
    }

    proptest! {
        #[test]
        fn similarity_is_scale_invariant(
            q in prop::collection::vec(1i32..10, 4),
            items in prop::collection::vec(prop::collection::vec(-9i32..10, 4), 1..8),
            scales in prop::collection::vec(0.001f64..1000.0, 8),
        ) {
            let q: Vec<f64> = q.into_iter().map(f64::from).collect();
            let items: Vec<Vec<f64>> = items.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect();
            prop_assume!(items.iter().all(|v| v.iter().any(|x| *x != 0.0)));
            prop_assume!(distinct_cosines(&q, &items));
            let named = |scale: &dyn Fn(usize) -> f64| -> Vec<(String, EmbeddingVector)> {
                items.iter().enumerate().map(|(i, v)| {
                    (format!("p{i}"), EmbeddingVector::new("m", v.iter().map(|x| x * scale(i)).collect()))
                }).collect()
            };
            let qv = EmbeddingVector::new("m", q.clone());
            let base = rank_by_similarity("q", &qv, &named(&|_| 1.0)).unwrap();
            let scaled_q = EmbeddingVector::new("m", q.iter().map(|x| x * scales[7]).collect());
            let scaled = rank_by_similarity("q", &scaled_q, &named(&|i| scales[i])).unwrap();
            prop_assert_eq!(ids(&base), ids(&scaled));
        }

        #[test]
        fn rankers_return_permutations(
            n in 1usize..30,
            seed in any::<u64>(),
        ) {
            let examples: Vec<String> = (0..n).map(|i| format!("p{i:02}")).collect();
            let mut expected = examples.clone();
            expected.sort();
            let r = rank_random("q", &examples, seed);
            let mut got: Vec<String> = r.product_ids().map(String::from).collect();
            got.sort();
            prop_assert_eq!(&got, &expected);
            let m = PopularityModel { weights: [1.0, 0.0, 0.0, 0.0], scores: BTreeMap::new() };
            let mut got: Vec<String> = rank_most_popular(&m, "q", &examples).product_ids().map(String::from).collect();
            got.sort();
            prop_assert_eq!(got, expected);
        }
    }
}
