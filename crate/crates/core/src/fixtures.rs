//! Synthetic datasets for tests, benchmarks and demos.
//!
//! Every generator is deterministic in its arguments.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::catalog::{Catalog, Dataset, EsciLabel, Judgment, JudgmentSet, Product, Query, QuerySet, Split, SplitPolicy};
use crate::hashing::substream;

/// Label fractions in `[E, S, C, I]` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proportions(pub [f64; 4]);

/// Label mix of a popularity-filtered shopping-query sample:
/// E 37.7%, S 37.0%, C 3.5%, I 21.8%.
pub const FILTERED_SAMPLE_PROPORTIONS: Proportions = Proportions([0.377, 0.370, 0.035, 0.218]);

/// Examples per query in the same sample.
pub const FILTERED_SAMPLE_EQ_RATIO: f64 = 4.8;

fn assemble(products: Vec<Product>, queries: Vec<Query>, judgments: Vec<Judgment>) -> Dataset {
    let catalog = Catalog::from_products(products).expect("fixture product ids are unique");
    let queries = QuerySet::from_queries(queries).expect("fixture query ids are unique");
    let judgments = JudgmentSet::from_judgments(judgments).expect("fixture judgments are unique");
    Dataset::build(catalog, queries, judgments)
        .expect("fixture is consistent")
        .0
}

/// Split `total` into integer counts following `weights` (largest remainder).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// `n_queries` queries over a `catalog_size`-product catalog whose label
/// mix matches `proportions` and whose mean examples per query is
/// `eq_ratio` (rounded to a whole number of judgments). Splits follow the
/// default [`SplitPolicy`].
pub fn proportional(n_queries: usize, catalog_size: usize, proportions: Proportions, eq_ratio: f64, seed: u64) -> Dataset {
    assert!(n_queries > 0 && eq_ratio >= 1.0);
    let mut rng = substream(seed, &["fixture", "proportional"]);
    let total = (eq_ratio * n_queries as f64).round() as usize;
    // Every query gets one example, the rest land uniformly at random.
    let mut per_query = vec![1usize; n_queries];
    for _ in n_queries..total {
        per_query[rng.random_range(0..n_queries)] += 1;
    }
    let max = *per_query.iter().max().expect("non-empty");
    assert!(max <= catalog_size, "catalog too small for {max} examples per query");
    let mut labels: Vec<EsciLabel> = apportion(total, &proportions.0)
        .into_iter()
        .zip(EsciLabel::ALL)
        .flat_map(|(n, l)| std::iter::repeat_n(l, n))
        .collect();
    labels.shuffle(&mut rng);

    let products = (0..catalog_size)
        .map(|i| Product::new(format!("P{i:05}"), format!("synthetic product {i}")))
        .collect();
    let policy = SplitPolicy::default();
    let mut queries = Vec::new();
    let mut judgments = Vec::new();
    let mut next_label = labels.into_iter();
    for (q, &n) in per_query.iter().enumerate() {
        let qid = format!("Q{q:05}");
        let split = policy.assign(&qid);
        for p in index::sample(&mut rng, catalog_size, n) {
            let label = next_label.next().expect("one label per judgment");
            judgments.push(Judgment::original(&qid, format!("P{p:05}"), label, split));
        }
        queries.push(Query::new(qid, format!("synthetic query {q}")));
    }
    assemble(products, queries, judgments)
}

/// Baseline benchmark fixture: 300 train and 240 test queries with two to
/// four examples each over 300 products. Every query has one exact match
/// drawn from a 30-product popular head; the other examples come from the
/// tail with S/C/I labels, so training popularity predicts relevance.
pub fn standard(seed: u64) -> Dataset {
    const PRODUCTS: usize = 300;
    const HEAD: usize = 30;
    let mut rng = substream(seed, &["fixture", "standard"]);
    let products = (0..PRODUCTS)
        .map(|i| Product::new(format!("S{i:03}"), format!("standard item {i}")))
        .collect();
    let mut queries = Vec::new();
    let mut judgments = Vec::new();
    for q in 0..540 {
        let split = if q < 300 { Split::Train } else { Split::Test };
        let qid = format!("SQ{q:03}");
        let head = rng.random_range(0..HEAD);
        judgments.push(Judgment::original(&qid, format!("S{head:03}"), EsciLabel::Exact, split));
        let extra = rng.random_range(1..=3);
        for t in index::sample(&mut rng, PRODUCTS - HEAD, extra) {
            let label = [EsciLabel::Substitute, EsciLabel::Complement, EsciLabel::Irrelevant][rng.random_range(0..3)];
            judgments.push(Judgment::original(&qid, format!("S{:03}", HEAD + t), label, split));
        }
        queries.push(Query::new(qid, format!("standard query {q}")));
    }
    assemble(products, queries, judgments)
}

const COLORS: [&str; 5] = ["red", "blue", "green", "black", "white"];
const NOUNS: [&str; 10] = [
    "lamp", "chair", "kettle", "blanket", "backpack", "mirror", "speaker", "bottle", "jacket", "candle",
];

/// 50 products (every color × noun) and 30 `"<color> <noun>"` queries whose
/// exact match shares both tokens, whose substitutes share the noun and
/// whose irrelevant examples share neither. Every third query is train.
pub fn lexical_overlap() -> Dataset {
    let pid = |c: usize, n: usize| format!("L{n}{c}");
    let mut products = Vec::new();
    for (n, noun) in NOUNS.iter().enumerate() {
        for (c, color) in COLORS.iter().enumerate() {
            let mut p = Product::new(pid(c, n), format!("{color} {noun}"));
            p.description = format!("a sturdy everyday {noun}");
            p.color = color.to_string();
            p.image_ref = Some(format!("images/{color}-{noun}.jpg"));
            products.push(p);
        }
    }
    let mut queries = Vec::new();
    let mut judgments = Vec::new();
    for i in 0..30 {
        let n = i % 10;
        let c = (i / 10 + n) % 5;
        let qid = format!("LQ{i:02}");
        let split = if i % 3 == 0 { Split::Train } else { Split::Test };
        queries.push(Query::new(&qid, format!("{} {}", COLORS[c], NOUNS[n])));
        judgments.push(Judgment::original(&qid, pid(c, n), EsciLabel::Exact, split));
        for dc in [1, 2] {
            judgments.push(Judgment::original(&qid, pid((c + dc) % 5, n), EsciLabel::Substitute, split));
        }
        for dn in [3, 5, 7] {
            judgments.push(Judgment::original(&qid, pid((c + dn) % 5, (n + dn) % 10), EsciLabel::Irrelevant, split));
        }
    }
    assemble(products, queries, judgments)
}

const MATERIALS: [&str; 4] = ["silk", "wool", "steel", "bamboo"];
const NEUTRAL: [&str; 12] = [
    "alpha", "bravo", "delta", "echo", "foxtrot", "golf", "hotel", "india", "kilo", "lima", "oscar", "tango",
];

/// Products whose human text carries no query terms: titles are neutral
/// code words, while the distinguishing color, material and noun appear only
/// in the image locator. Captioning or tagging the image exposes them.
/// 40 products, 30 `"<color> <material> <noun>"` queries; every fifth query
/// is train.
pub fn caption_only() -> Dataset {
    let mut products = Vec::new();
    let mut attrs = Vec::new();
    for i in 0..40 {
        let (c, m, n) = (i % 5, (i / 5) % 4, (i * 3 + i / 10) % 10);
        let mut p = Product::new(format!("C{i:02}"), format!("catalog entry {}", NEUTRAL[(i * 7) % 12]));
        p.image_ref = Some(format!("images/{}-{}-{}.jpg", COLORS[c], MATERIALS[m], NOUNS[n]));
        products.push(p);
        attrs.push((c, m, n));
    }
    let mut queries = Vec::new();
    let mut judgments = Vec::new();
    for q in 0..30 {
        let target = (q * 11) % 40;
        let (c, m, n) = attrs[target];
        let qid = format!("CQ{q:02}");
        let split = if q % 5 == 0 { Split::Train } else { Split::Test };
        queries.push(Query::new(&qid, format!("{} {} {}", COLORS[c], MATERIALS[m], NOUNS[n])));
        judgments.push(Judgment::original(&qid, format!("C{target:02}"), EsciLabel::Exact, split));
        let mut others: Vec<usize> = (0..40)
            .filter(|&j| j != target)
            .filter(|&j| {
                let (c2, m2, n2) = attrs[j];
                c2 != c && m2 != m && n2 != n
            })
            .collect();
        let shift = q % others.len().max(1);
        others.rotate_left(shift);
        for &j in others.iter().take(4) {
            judgments.push(Judgment::original(&qid, format!("C{j:02}"), EsciLabel::Irrelevant, split));
        }
    }
    assemble(products, queries, judgments)
}

fn misspell(word: &str) -> String {
    // Double the last letter: "lamp" -> "lampp".
    let mut out = word.to_string();
    out.extend(word.chars().last());
    out
}

/// 30 `"<color> <noun>"` queries, one exact match and four irrelevant
/// examples each. With `misspelled`, every product title has each word
/// garbled so no token survives intact, though most character trigrams do.
/// All queries are test.
pub fn spelling(misspelled: bool) -> Dataset {
    let pid = |c: usize, n: usize| format!("M{n}{c}");
    let mut products = Vec::new();
    for (n, noun) in NOUNS.iter().enumerate() {
        for (c, color) in COLORS.iter().enumerate() {
            let title = if misspelled {
                format!("{} {}", misspell(color), misspell(noun))
            } else {
                format!("{color} {noun}")
            };
            products.push(Product::new(pid(c, n), title));
        }
    }
    let mut queries = Vec::new();
    let mut judgments = Vec::new();
    for i in 0..30 {
        let n = i % 10;
        let c = (i / 10 + n) % 5;
        let qid = format!("MQ{i:02}");
        queries.push(Query::new(&qid, format!("{} {}", COLORS[c], NOUNS[n])));
        judgments.push(Judgment::original(&qid, pid(c, n), EsciLabel::Exact, Split::Test));
        for dn in [2, 4, 6, 8] {
            judgments.push(Judgment::original(&qid, pid((c + dn) % 5, (n + dn) % 10), EsciLabel::Irrelevant, Split::Test));
        }
    }
    assemble(products, queries, judgments)
}
