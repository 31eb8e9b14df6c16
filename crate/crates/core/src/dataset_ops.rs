//! Dataset construction: popularity filtering, irrelevant padding and
//! label-distribution statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    Catalog, Dataset, EsciLabel, Judgment, JudgmentSet, Origin, QuerySet,
};
use crate::hashing;
use crate::par::ExecMode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("min_occurrences must be at least 1")]
    ZeroThreshold,
    #[error("no products appear in at least {min_occurrences} queries; nothing left to evaluate")]
    EmptyAfterFilter { min_occurrences: usize },
    #[error("dataset has no judgments")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Keep products judged for at least `min_occurrences` distinct queries,
/// drop their judgments otherwise, then drop queries left without any.
pub fn filter_by_popularity(dataset: &Dataset, min_occurrences: usize) -> Result<Dataset> {
    if min_occurrences == 0 {
        return Err(DatasetError::ZeroThreshold);
    }
    let mut occurrences: BTreeMap<&str, usize> = BTreeMap::new();
    for j in dataset.judgments().iter() {
        *occurrences.entry(j.product_id.as_str()).or_default() += 1;
    }
    let keep: BTreeSet<String> = occurrences
        .into_iter()
        .filter(|(_, n)| *n >= min_occurrences)
        .map(|(p, _)| p.to_string())
        .collect();

    let mut catalog = dataset.catalog().clone();
    catalog.retain(|p| keep.contains(&p.product_id));
    let mut judgments = dataset.judgments().clone();
    judgments.retain(|j| keep.contains(&j.product_id));
    let mut queries = dataset.queries().clone();
    queries.retain(|q| !judgments.for_query(&q.query_id).is_empty());

    if judgments.is_empty() {
        return Err(DatasetError::EmptyAfterFilter { min_occurrences });
    }
    Ok(Dataset::from_parts(catalog, queries, judgments))
}

/// Padding parameters. Pad sizes used in the reference experiments are
/// 0, 5, 10 and 20; any value is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadConfig {
    pub pad_size: usize,
    pub seed: u64,
}

/// A query whose eligible pool ran out before reaching `pad_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustionWarning {
    pub query_id: String,
    pub wanted: usize,
    pub added: usize,
}

#[derive(Debug, Clone)]
pub struct Padded {
    pub dataset: Dataset,
    pub warnings: Vec<ExhaustionWarning>,
}

/// Pad every query up to `pad_size` examples with products sampled from
/// the dataset's own catalog.
pub fn pad_with_irrelevant(dataset: &Dataset, config: PadConfig) -> Padded {
    pad_with_irrelevant_from(dataset, config, None, ExecMode::default())
}

/// Pad every query up to `config.pad_size` examples.
///
/// Each query draws uniformly without replacement from `pool` (the
/// dataset catalog when `None`) minus its existing examples. Every added
/// judgment is labeled I with origin padded and inherits its query's
/// split. Each query uses its own ChaCha20 stream keyed by
/// `(seed, query_id)`, so the result does not depend on `exec`.
pub fn pad_with_irrelevant_from(
    dataset: &Dataset,
    config: PadConfig,
    pool: Option<&Catalog>,
    exec: ExecMode,
) -> Padded {
    let pool = pool.unwrap_or_else(|| dataset.catalog());
    let pool_ids: Vec<&str> = pool.ids().collect();
    let query_ids: Vec<&str> = dataset.queries().iter().map(|q| q.query_id.as_str()).collect();

    let per_query: Vec<(Vec<Judgment>, Option<ExhaustionWarning>)> = exec.map(&query_ids, |&qid| {
        let existing = dataset.judgments().for_query(qid);
        if existing.len() >= config.pad_size {
            return (Vec::new(), None);
        }
        let wanted = config.pad_size - existing.len();
        let taken: BTreeSet<&str> = existing.iter().map(|j| j.product_id.as_str()).collect();
        let eligible: Vec<&str> = pool_ids.iter().copied().filter(|p| !taken.contains(p)).collect();
        let amount = wanted.min(eligible.len());
        let mut rng = hashing::substream(config.seed, &["pad", qid]);
        let split = dataset.query_split(qid);
        let added = index::sample(&mut rng, eligible.len(), amount)
            .into_iter()
            .map(|i| Judgment {
                query_id: qid.to_string(),
                product_id: eligible[i].to_string(),
                label: EsciLabel::Irrelevant,
                origin: Origin::Padded,
                split,
            })
            .collect();
        let warning = (amount < wanted).then(|| ExhaustionWarning {
            query_id: qid.to_string(),
            wanted,
            added: amount,
        });
        (added, warning)
    });

    let mut judgments = dataset.judgments().clone();
    let mut catalog = dataset.catalog().clone();
    let mut warnings = Vec::new();
    for (added, warning) in per_query {
        for j in added {
            if !catalog.contains(&j.product_id) {
                catalog.upsert(pool.get(&j.product_id).expect("sampled from pool").clone());
            }
            judgments
                .insert(j)
                .expect("sampled products exclude existing examples");
        }
        if let Some(w) = warning {
            log::warn!(
                "query {}: catalog exhausted, added {} of {} padding items",
                w.query_id,
                w.added,
                w.wanted
            );
            warnings.push(w);
        }
    }
    Padded {
        dataset: Dataset::from_parts(catalog, dataset.queries().clone(), judgments),
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelShare {
    pub count: usize,
    pub percent: f64,
}

/// Label distribution over all judgments of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    #[serde(rename = "E")]
    pub exact: LabelShare,
    #[serde(rename = "S")]
    pub substitute: LabelShare,
    #[serde(rename = "C")]
    pub complement: LabelShare,
    #[serde(rename = "I")]
    pub irrelevant: LabelShare,
    pub total_examples: usize,
    pub total_queries: usize,
    /// Examples per query.
    pub eq_ratio: f64,
}

impl LabelStats {
    pub fn share(&self, label: EsciLabel) -> LabelShare {
        match label {
            EsciLabel::Exact => self.exact,
            EsciLabel::Substitute => self.substitute,
            EsciLabel::Complement => self.complement,
            EsciLabel::Irrelevant => self.irrelevant,
        }
    }
}

pub fn compute_label_stats(dataset: &Dataset) -> Result<LabelStats> {
    label_stats_of(dataset.judgments(), dataset.queries())
}

pub(crate) fn label_stats_of(judgments: &JudgmentSet, queries: &QuerySet) -> Result<LabelStats> {
    if judgments.is_empty() || queries.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut counts = [0usize; 4];
    for j in judgments.iter() {
        counts[j.label.index()] += 1;
    }
    let total = judgments.len();
    let share = |c: usize| LabelShare {
        count: c,
        percent: 100.0 * c as f64 / total as f64,
    };
    Ok(LabelStats {
        exact: share(counts[0]),
        substitute: share(counts[1]),
        complement: share(counts[2]),
        irrelevant: share(counts[3]),
        total_examples: total,
        total_queries: queries.len(),
        eq_ratio: total as f64 / queries.len() as f64,
    })
}

/// One column per pad size, rows for each label, examples, queries and E/Q.
pub fn render_label_stats_table(columns: &[(usize, LabelStats)]) -> String {
    let mut header = vec!["Label".to_string()];
    header.extend(columns.iter().map(|(pad, _)| format!("PadSize={pad}")));
    let mut rows: Vec<Vec<String>> = vec![header];
    for label in EsciLabel::ALL {
        let mut row = vec![label.to_string()];
        for (_, stats) in columns {
            let s = stats.share(label);
            row.push(format!("{:.1}% ({})", s.percent, s.count));
        }
        rows.push(row);
    }
    let mut examples = vec!["# Examples".to_string()];
    let mut queries = vec!["# Queries".to_string()];
    let mut eq = vec!["E/Q Ratio".to_string()];
    for (_, s) in columns {
        examples.push(s.total_examples.to_string());
        queries.push(s.total_queries.to_string());
        eq.push(format!("{:.1}", s.eq_ratio));
    }
    rows.extend([examples, queries, eq]);
    render_aligned(&rows)
}

/// Left-align the first column and right-align the rest.
pub(crate) fn render_aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Product, Query, Split};
    use proptest::prelude::*;

    fn build(products: usize, judgments: &[(&str, usize, EsciLabel)]) -> Dataset {
        let catalog =
            Catalog::from_products((0..products).map(|i| Product::new(format!("P{i:03}"), format!("item {i}"))))
                .unwrap();
        let qids: BTreeSet<&str> = judgments.iter().map(|(q, _, _)| *q).collect();
        let queries = QuerySet::from_queries(qids.iter().map(|q| Query::new(*q, format!("text {q}")))).unwrap();
        let js = JudgmentSet::from_judgments(
            judgments
                .iter()
                .map(|(q, p, l)| Judgment::original(*q, format!("P{p:03}"), *l, Split::Test)),
        )
        .unwrap();
        Dataset::build(catalog, queries, js).unwrap().0
    }

    #[test]
    fn popularity_filter_keeps_popular_products() {
        use EsciLabel::*;
        // P000 in q1,q2,q3; P001 in q1,q2; q4 only has P001.
        let d = build(
            2,
            &[
                ("q1", 0, Exact),
                ("q2", 0, Substitute),
                ("q3", 0, Exact),
                ("q1", 1, Exact),
                ("q2", 1, Irrelevant),
            ],
        );
        let f = filter_by_popularity(&d, 3).unwrap();
        assert!(f.catalog().contains("P000"));
        assert!(!f.catalog().contains("P001"));
        assert_eq!(f.judgments().len(), 3);
        assert_eq!(f.queries().len(), 3);

        let d2 = build(2, &[("q1", 0, Exact), ("q2", 0, Exact), ("q3", 0, Exact), ("q4", 1, Exact)]);
        let f2 = filter_by_popularity(&d2, 3).unwrap();
        assert!(!f2.queries().contains("q4"), "emptied query removed");
    }

    #[test]
    fn threshold_one_is_a_no_op() {
        use EsciLabel::*;
        let d = build(3, &[("q1", 0, Exact), ("q2", 1, Exact), ("q2", 2, Complement)]);
        assert_eq!(filter_by_popularity(&d, 1).unwrap(), d);
    }

    #[test]
    fn filter_errors() {
        let d = build(1, &[("q1", 0, EsciLabel::Exact)]);
        assert_eq!(filter_by_popularity(&d, 0), Err(DatasetError::ZeroThreshold));
        assert_eq!(
            filter_by_popularity(&d, 2),
            Err(DatasetError::EmptyAfterFilter { min_occurrences: 2 })
        );
    }

    #[test]
    fn pads_short_queries_only() {
        use EsciLabel::*;
        let mut js: Vec<(&str, usize, EsciLabel)> = (0..3).map(|p| ("short", p, Exact)).collect();
        js.extend((3..10).map(|p| ("long", p, Substitute)));
        let d = build(50, &js);
        let padded = pad_with_irrelevant(&d, PadConfig { pad_size: 5, seed: 1 });
        assert!(padded.warnings.is_empty());
        let short = padded.dataset.judgments().for_query("short");
        assert_eq!(short.len(), 5);
        let added: Vec<_> = short.iter().filter(|j| j.origin == Origin::Padded).collect();
        assert_eq!(added.len(), 2);
        assert!(added.iter().all(|j| j.label == Irrelevant));
        assert_eq!(
            padded.dataset.judgments().for_query("long"),
            d.judgments().for_query("long")
        );
    }

    #[test]
    fn exhaustion_warns() {
        let d = build(4, &[("q", 0, EsciLabel::Exact)]);
        let padded = pad_with_irrelevant(&d, PadConfig { pad_size: 10, seed: 3 });
        assert_eq!(padded.dataset.judgments().for_query("q").len(), 4);
        assert_eq!(
            padded.warnings,
            vec![ExhaustionWarning {
                query_id: "q".into(),
                wanted: 9,
                added: 3
            }]
        );
    }

    #[test]
    fn padding_from_external_pool_extends_catalog() {
        let d = build(2, &[("q", 0, EsciLabel::Exact)]);
        let pool = Catalog::from_products((0..30).map(|i| Product::new(format!("P{i:03}"), "x"))).unwrap();
        let padded = pad_with_irrelevant_from(&d, PadConfig { pad_size: 8, seed: 9 }, Some(&pool), ExecMode::Sequential);
        assert!(padded.warnings.is_empty());
        assert_eq!(padded.dataset.judgments().for_query("q").len(), 8);
        for j in padded.dataset.judgments().iter() {
            assert!(padded.dataset.catalog().contains(&j.product_id));
        }
    }

    #[test]
    fn padded_split_follows_query() {
        let catalog = Catalog::from_products((0..20).map(|i| Product::new(format!("P{i}"), "x"))).unwrap();
        let queries = QuerySet::from_queries([Query::new("tr", "a"), Query::new("te", "b")]).unwrap();
        let js = JudgmentSet::from_judgments([
            Judgment::original("tr", "P0", EsciLabel::Exact, Split::Train),
            Judgment::original("te", "P1", EsciLabel::Exact, Split::Test),
        ])
        .unwrap();
        let d = Dataset::build(catalog, queries, js).unwrap().0;
        let p = pad_with_irrelevant(&d, PadConfig { pad_size: 4, seed: 0 }).dataset;
        assert!(p.judgments().for_query("tr").iter().all(|j| j.split == Split::Train));
        assert!(p.judgments().for_query("te").iter().all(|j| j.split == Split::Test));
    }

    #[test]
    fn uniform_stats() {
        use EsciLabel::*;
        let d = build(4, &[("q", 0, Exact), ("q", 1, Substitute), ("q", 2, Complement), ("q", 3, Irrelevant)]);
        let s = compute_label_stats(&d).unwrap();
        for l in EsciLabel::ALL {
            assert_eq!(s.share(l).percent, 25.0);
            assert_eq!(s.share(l).count, 1);
        }
        assert_eq!(s.eq_ratio, 4.0);
    }

    #[test]
    fn larger_pad_raises_irrelevant_share() {
        use EsciLabel::*;
        let js = [
            ("q0", 0, Exact),
            ("q0", 1, Substitute),
            ("q1", 3, Exact),
            ("q1", 4, Substitute),
            ("q1", 5, Exact),
            ("q2", 6, Exact),
            ("q3", 7, Substitute),
            ("q3", 8, Exact),
        ];
        let d = build(100, &js);
        let i5 = compute_label_stats(&pad_with_irrelevant(&d, PadConfig { pad_size: 5, seed: 4 }).dataset)
            .unwrap()
            .irrelevant
            .percent;
        let i10 = compute_label_stats(&pad_with_irrelevant(&d, PadConfig { pad_size: 10, seed: 4 }).dataset)
            .unwrap()
            .irrelevant
            .percent;
        assert!(i10 > i5, "{i10} <= {i5}");
    }

    #[test]
    fn stats_table_layout() {
        use EsciLabel::*;
        let d = build(4, &[("q", 0, Exact), ("q", 1, Substitute), ("q", 2, Complement), ("q", 3, Irrelevant)]);
        let s = compute_label_stats(&d).unwrap();
        let t = render_label_stats_table(&[(0, s.clone()), (5, s)]);
        assert!(t.lines().next().unwrap().contains("PadSize=5"));
        assert!(t.contains("25.0% (1)"));
        assert!(t.contains("E/Q Ratio"));
        assert_eq!(t.lines().count(), 8);
    }

    fn dataset_strategy() -> impl Strategy<Value = Dataset> {
        (
            5usize..60,
            prop::collection::vec(prop::collection::btree_set(0usize..60, 1..8), 1..12),
            prop::collection::vec(0usize..4, 96),
        )
            .prop_map(|(n_products, queries, labels)| {
                let mut js = Vec::new();
                let mut k = 0;
                for (qi, set) in queries.iter().enumerate() {
                    for p in set.iter().filter(|p| **p < n_products) {
                        js.push((format!("q{qi}"), *p, EsciLabel::ALL[labels[k % labels.len()]]));
                        k += 1;
                    }
                }
                if js.is_empty() {
                    js.push(("q0".into(), 0, EsciLabel::Exact));
                }
                let refs: Vec<(&str, usize, EsciLabel)> = js.iter().map(|(q, p, l)| (q.as_str(), *p, *l)).collect();
                build(n_products, &refs)
            })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(d in dataset_strategy(), min in 1usize..4) {
            if let Ok(once) = filter_by_popularity(&d, min) {
                prop_assert_eq!(filter_by_popularity(&once, min).unwrap(), once);
            }
        }

        #[test]
        fn padding_invariants(d in dataset_strategy(), pad in 0usize..25, seed in any::<u64>()) {
            let padded = pad_with_irrelevant(&d, PadConfig { pad_size: pad, seed });
            let out = &padded.dataset;
            // originals untouched
            for j in d.judgments().iter() {
                prop_assert_eq!(out.judgments().label_of(&j.query_id, &j.product_id), Some(j.label));
            }
            for j in out.judgments().iter().filter(|j| j.origin == Origin::Padded) {
                prop_assert_eq!(j.label, EsciLabel::Irrelevant);
                prop_assert!(d.judgments().label_of(&j.query_id, &j.product_id).is_none());
            }
            let warned: BTreeSet<&str> = padded.warnings.iter().map(|w| w.query_id.as_str()).collect();
            for q in out.queries().iter() {
                let n = out.judgments().for_query(&q.query_id).len();
                prop_assert!(n >= pad || warned.contains(q.query_id.as_str()));
            }
            let before = compute_label_stats(&d).unwrap();
            let after = compute_label_stats(out).unwrap();
            prop_assert!(after.eq_ratio >= before.eq_ratio);
            prop_assert!(after.irrelevant.percent >= before.irrelevant.percent - 1e-9);
            let sum: f64 = EsciLabel::ALL.iter().map(|l| after.share(*l).percent).sum();
            prop_assert!((sum - 100.0).abs() < 0.1);
            let again = pad_with_irrelevant_from(&d, PadConfig { pad_size: pad, seed }, None, ExecMode::Sequential);
            prop_assert_eq!(&again.dataset, out);
        }
    }
}
