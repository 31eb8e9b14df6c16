//! Products, queries and ESCI judgments, plus loading and validation of
//! the on-disk record files.
//!
//! Records are line-delimited JSON (one object per line) or CSV with a
//! header row. Line numbers in errors are 1-based and refer to the
//! physical line in the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::hashing;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown ESCI label {token:?}")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}: duplicate product_id {id:?} on lines {first_line} and {second_line}")]
    DuplicateProduct {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("{path}: duplicate query_id {id:?} on lines {first_line} and {second_line}")]
    DuplicateQuery {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error(
        "{path}: duplicate judgment ({query_id:?}, {product_id:?}) on lines {first_line} and {second_line}"
    )]
    DuplicateJudgment {
        path: PathBuf,
        query_id: String,
        product_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("duplicate {kind} {id:?}")]
    Duplicate { kind: &'static str, id: String },
    #[error("dataset has dangling references: {0}")]
    Dangling(String),
    #[error("unsupported record format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),
}

pub type Result<T> = std::result::Result<T, CatalogError>;

/// Record file encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

impl Format {
    /// Guess from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            _ => Err(CatalogError::UnknownFormat(s.to_string())),
        }
    }
}

/// Value plus non-fatal diagnostics produced while loading it.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

/// Where a generated field came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider_id: String,
    pub model_id: String,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedText {
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTags {
    pub tags: Vec<String>,
    pub provenance: Provenance,
}

/// A catalog item. Optional human text fields are normalized to empty
/// strings so document composition never has to branch on absence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub bullet_points: String,
    #[serde(default)]
    pub brand: String,
    #[serde(default)]
    pub color: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_caption: Option<GeneratedText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_tags: Option<GeneratedTags>,
}

impl Product {
    pub fn new(product_id: impl Into<String>, title: impl Into<String>) -> Self {
        Product {
            product_id: product_id.into(),
            title: title.into(),
            description: String::new(),
            bullet_points: String::new(),
            brand: String::new(),
            color: String::new(),
            image_ref: None,
            generated_caption: None,
            generated_tags: None,
        }
    }

    pub fn is_enriched(&self) -> bool {
        self.generated_caption.is_some() || self.generated_tags.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

/// A query after keyword expansion by a preprocessing provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedQuery {
    pub query_id: String,
    pub original_text: String,
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    /// True when the provider failed or returned nothing and the original
    /// text stands in as the only keyword.
    #[serde(default)]
    pub fallback: bool,
}

impl ProcessedQuery {
    /// The string rankers consume.
    pub fn joined(&self) -> String {
        self.keywords.join(", ")
    }
}

pub type ProcessedQuerySet = BTreeMap<String, ProcessedQuery>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EsciLabel {
    Exact,
    Substitute,
    Complement,
    Irrelevant,
}

impl EsciLabel {
    pub const ALL: [EsciLabel; 4] = [
        EsciLabel::Exact,
        EsciLabel::Substitute,
        EsciLabel::Complement,
        EsciLabel::Irrelevant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EsciLabel::Exact => "E",
            EsciLabel::Substitute => "S",
            EsciLabel::Complement => "C",
            EsciLabel::Irrelevant => "I",
        }
    }

    /// Position in `[E, S, C, I]`.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EsciLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown ESCI label {0:?}")]
pub struct LabelParseError(pub String);

impl FromStr for EsciLabel {
    type Err = LabelParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "E" | "e" => Ok(EsciLabel::Exact),
            "S" | "s" => Ok(EsciLabel::Substitute),
            "C" | "c" => Ok(EsciLabel::Complement),
            "I" | "i" => Ok(EsciLabel::Irrelevant),
            other => Err(LabelParseError(other.to_string())),
        }
    }
}

impl Serialize for EsciLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EsciLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Padded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Deterministic query-level split used when a judgment carries no split tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub train_fraction: f64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy { train_fraction: 0.8 }
    }
}

impl SplitPolicy {
    pub fn assign(&self, query_id: &str) -> Split {
        if hashing::unit_interval(&format!("split\u{0}{query_id}")) < self.train_fraction {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub product_id: String,
    pub label: EsciLabel,
    pub origin: Origin,
    pub split: Split,
}

impl Judgment {
    pub fn original(
        query_id: impl Into<String>,
        product_id: impl Into<String>,
        label: EsciLabel,
        split: Split,
    ) -> Self {
        Judgment {
            query_id: query_id.into(),
            product_id: product_id.into(),
            label,
            origin: Origin::Original,
            split,
        }
    }
}

/// Products keyed and iterated by `product_id`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    products: BTreeMap<String, Product>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_products(products: impl IntoIterator<Item = Product>) -> Result<Self> {
        let mut catalog = Catalog::new();
        for p in products {
            catalog.insert(p)?;
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, product: Product) -> Result<()> {
        if product.product_id.is_empty() {
            return Err(CatalogError::Duplicate {
                kind: "empty product_id",
                id: String::new(),
            });
        }
        if self.products.contains_key(&product.product_id) {
            return Err(CatalogError::Duplicate {
                kind: "product_id",
                id: product.product_id,
            });
        }
        self.products.insert(product.product_id.clone(), product);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn upsert(&mut self, product: Product) {
        self.products.insert(product.product_id.clone(), product);
    }

    pub fn get(&self, product_id: &str) -> Option<&Product> {
        self.products.get(product_id)
    }

    pub fn contains(&self, product_id: &str) -> bool {
        self.products.contains_key(product_id)
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Product> {
        self.products.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.products.keys().map(String::as_str)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Product) -> bool) {
        self.products.retain(|_, p| keep(p));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    queries: BTreeMap<String, Query>,
}

impl QuerySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_queries(queries: impl IntoIterator<Item = Query>) -> Result<Self> {
        let mut set = QuerySet::new();
        for q in queries {
            set.insert(q)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, query: Query) -> Result<()> {
        if self.queries.contains_key(&query.query_id) {
            return Err(CatalogError::Duplicate {
                kind: "query_id",
                id: query.query_id,
            });
        }
        self.queries.insert(query.query_id.clone(), query);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&Query> {
        self.queries.get(query_id)
    }

    pub fn contains(&self, query_id: &str) -> bool {
        self.queries.contains_key(query_id)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Query> {
        self.queries.values()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Query) -> bool) {
        self.queries.retain(|_, q| keep(q));
    }
}

/// Judgments grouped by query, each group sorted by `product_id`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JudgmentSet {
    by_query: BTreeMap<String, Vec<Judgment>>,
    len: usize,
}

impl JudgmentSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_judgments(judgments: impl IntoIterator<Item = Judgment>) -> Result<Self> {
        let mut set = JudgmentSet::new();
        for j in judgments {
            set.insert(j)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, judgment: Judgment) -> Result<()> {
        let group = self.by_query.entry(judgment.query_id.clone()).or_default();
        match group.binary_search_by(|j| j.product_id.cmp(&judgment.product_id)) {
            Ok(_) => Err(CatalogError::Duplicate {
                kind: "judgment",
                id: format!("{}/{}", judgment.query_id, judgment.product_id),
            }),
            Err(pos) => {
                group.insert(pos, judgment);
                self.len += 1;
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn for_query(&self, query_id: &str) -> &[Judgment] {
        self.by_query.get(query_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn label_of(&self, query_id: &str, product_id: &str) -> Option<EsciLabel> {
        let group = self.for_query(query_id);
        group
            .binary_search_by(|j| j.product_id.as_str().cmp(product_id))
            .ok()
            .map(|i| group[i].label)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[Judgment])> {
        self.by_query.iter().map(|(q, js)| (q.as_str(), js.as_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Judgment> {
        self.by_query.values().flatten()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Judgment) -> bool) {
        for group in self.by_query.values_mut() {
            group.retain(&mut keep);
        }
        self.by_query.retain(|_, g| !g.is_empty());
        self.len = self.by_query.values().map(Vec::len).sum();
    }
}

/// Referential problems found across the three record sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dangling_query_ids: Vec<String>,
    pub dangling_product_ids: Vec<String>,
    /// Queries with no judgments; dropped at construction.
    pub empty_queries: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.dangling_query_ids.is_empty()
            && self.dangling_product_ids.is_empty()
            && self.empty_queries.is_empty()
    }

    pub fn has_dangling(&self) -> bool {
        !self.dangling_query_ids.is_empty() || !self.dangling_product_ids.is_empty()
    }

    pub fn dropped_queries(&self) -> usize {
        self.empty_queries.len()
    }
}

pub fn validate_dataset(
    catalog: &Catalog,
    queries: &QuerySet,
    judgments: &JudgmentSet,
) -> ValidationReport {
    let mut dangling_q = BTreeSet::new();
    let mut dangling_p = BTreeSet::new();
    for j in judgments.iter() {
        if !queries.contains(&j.query_id) {
            dangling_q.insert(j.query_id.clone());
        }
        if !catalog.contains(&j.product_id) {
            dangling_p.insert(j.product_id.clone());
        }
    }
    let empty_queries = queries
        .iter()
        .filter(|q| judgments.for_query(&q.query_id).is_empty())
        .map(|q| q.query_id.clone())
        .collect();
    ValidationReport {
        dangling_query_ids: dangling_q.into_iter().collect(),
        dangling_product_ids: dangling_p.into_iter().collect(),
        empty_queries,
    }
}

/// Catalog, queries and judgments with referential integrity: every
/// judgment points at a known query and product, and every query has at
/// least one judgment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    catalog: Catalog,
    queries: QuerySet,
    judgments: JudgmentSet,
}

impl Dataset {
    /// Validate and assemble. Dangling references are an error; queries
    /// with zero judgments are dropped and listed in the returned report.
    pub fn build(
        catalog: Catalog,
        mut queries: QuerySet,
        judgments: JudgmentSet,
    ) -> Result<(Dataset, ValidationReport)> {
        let report = validate_dataset(&catalog, &queries, &judgments);
        if report.has_dangling() {
            let mut parts = Vec::new();
            if !report.dangling_query_ids.is_empty() {
                parts.push(format!("query_ids {:?}", report.dangling_query_ids));
            }
            if !report.dangling_product_ids.is_empty() {
                parts.push(format!("product_ids {:?}", report.dangling_product_ids));
            }
            return Err(CatalogError::Dangling(parts.join("; ")));
        }
        if !report.empty_queries.is_empty() {
            log::warn!("dropping {} queries with no judgments", report.empty_queries.len());
            queries.retain(|q| !judgments.for_query(&q.query_id).is_empty());
        }
        Ok((
            Dataset {
                catalog,
                queries,
                judgments,
            },
            report,
        ))
    }

    /// Caller guarantees the invariants.
    pub(crate) fn from_parts(catalog: Catalog, queries: QuerySet, judgments: JudgmentSet) -> Self {
        debug_assert!(!validate_dataset(&catalog, &queries, &judgments).has_dangling());
        Dataset {
            catalog,
            queries,
            judgments,
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn queries(&self) -> &QuerySet {
        &self.queries
    }

    pub fn judgments(&self) -> &JudgmentSet {
        &self.judgments
    }

    pub fn into_parts(self) -> (Catalog, QuerySet, JudgmentSet) {
        (self.catalog, self.queries, self.judgments)
    }

    /// Replace the catalog with one covering at least the same products,
    /// e.g. after enrichment.
    pub fn with_catalog(self, catalog: Catalog) -> Result<Dataset> {
        Dataset::build(catalog, self.queries, self.judgments).map(|(d, _)| d)
    }

    /// The split a query belongs to: test if any of its judgments is tagged test.
    pub fn query_split(&self, query_id: &str) -> Split {
        if self
            .judgments
            .for_query(query_id)
            .iter()
            .any(|j| j.split == Split::Test)
        {
            Split::Test
        } else {
            Split::Train
        }
    }
}

// ---------------------------------------------------------------------------
// Record IO
// ---------------------------------------------------------------------------

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read `(line, record)` pairs. Blank JSONL lines are skipped.
fn read_records<R: DeserializeOwned>(path: &Path, format: Format) -> Result<Vec<(usize, R)>> {
    let file = open(path)?;
    let mut out = Vec::new();
    match format {
        Format::Jsonl => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line_no = idx + 1;
                let line = line.map_err(|source| CatalogError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let rec = serde_json::from_str(trimmed).map_err(|e| CatalogError::Malformed {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?;
                out.push((line_no, rec));
            }
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| CatalogError::Malformed {
                    path: path.to_path_buf(),
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            for row in reader.records() {
                let row = row.map_err(|e| CatalogError::Malformed {
                    path: path.to_path_buf(),
                    line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                    message: e.to_string(),
                })?;
                let line_no = row.position().map(|p| p.line() as usize).unwrap_or(0);
                let rec = row
                    .deserialize(Some(&headers))
                    .map_err(|e| CatalogError::Malformed {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: e.to_string(),
                    })?;
                out.push((line_no, rec));
            }
        }
    }
    Ok(out)
}

fn empty_file_warning(path: &Path, kind: &str) -> String {
    let msg = format!("{} contains no {kind} records", path.display());
    log::warn!("{msg}");
    msg
}

fn non_empty(opt: Option<String>) -> Option<String> {
    opt.filter(|s| !s.trim().is_empty())
}

#[derive(Deserialize)]
struct ProductRecord {
    product_id: Option<String>,
    title: Option<String>,
    description: Option<String>,
    bullet_points: Option<String>,
    brand: Option<String>,
    color: Option<String>,
    image_ref: Option<String>,
    #[serde(default)]
    generated_caption: Option<GeneratedText>,
    #[serde(default)]
    generated_tags: Option<GeneratedTags>,
}

pub fn load_products(path: &Path, format: Format) -> Result<Loaded<Catalog>> {
    let records: Vec<(usize, ProductRecord)> = read_records(path, format)?;
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push(empty_file_warning(path, "product"));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut catalog = Catalog::new();
    for (line, rec) in records {
        let malformed = |message: &str| CatalogError::Malformed {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let product_id = non_empty(rec.product_id).ok_or_else(|| malformed("missing product_id"))?;
        let title = rec.title.ok_or_else(|| malformed("missing title"))?;
        if let Some(&first_line) = seen.get(&product_id) {
            return Err(CatalogError::DuplicateProduct {
                path: path.to_path_buf(),
                id: product_id,
                first_line,
                second_line: line,
            });
        }
        seen.insert(product_id.clone(), line);
        catalog.upsert(Product {
            product_id,
            title,
            description: rec.description.unwrap_or_default(),
            bullet_points: rec.bullet_points.unwrap_or_default(),
            brand: rec.brand.unwrap_or_default(),
            color: rec.color.unwrap_or_default(),
            image_ref: non_empty(rec.image_ref),
            generated_caption: rec.generated_caption,
            generated_tags: rec.generated_tags,
        });
    }
    Ok(Loaded {
        value: catalog,
        warnings,
    })
}

#[derive(Deserialize)]
struct QueryRecord {
    query_id: Option<String>,
    text: Option<String>,
}

pub fn load_queries(path: &Path, format: Format) -> Result<Loaded<QuerySet>> {
    let records: Vec<(usize, QueryRecord)> = read_records(path, format)?;
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push(empty_file_warning(path, "query"));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut set = QuerySet::new();
    for (line, rec) in records {
        let malformed = |message: &str| CatalogError::Malformed {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let query_id = non_empty(rec.query_id).ok_or_else(|| malformed("missing query_id"))?;
        let text = rec
            .text
            .filter(|t| !t.is_empty())
            .ok_or_else(|| malformed("missing or empty query text"))?;
        if let Some(&first_line) = seen.get(&query_id) {
            return Err(CatalogError::DuplicateQuery {
                path: path.to_path_buf(),
                id: query_id,
                first_line,
                second_line: line,
            });
        }
        seen.insert(query_id.clone(), line);
        set.insert(Query { query_id, text })?;
    }
    Ok(Loaded {
        value: set,
        warnings,
    })
}

#[derive(Deserialize)]
struct JudgmentRecord {
    query_id: Option<String>,
    product_id: Option<String>,
    label: Option<String>,
    split: Option<String>,
    origin: Option<String>,
}

pub fn load_judgments(path: &Path, format: Format) -> Result<Loaded<JudgmentSet>> {
    load_judgments_with(path, format, &SplitPolicy::default())
}

/// As [`load_judgments`], assigning untagged records with `policy`.
///
/// An `origin` column is optional; when present it must be `original` or
/// `padded`, and padded records must carry label I.
pub fn load_judgments_with(
    path: &Path,
    format: Format,
    policy: &SplitPolicy,
) -> Result<Loaded<JudgmentSet>> {
    let records: Vec<(usize, JudgmentRecord)> = read_records(path, format)?;
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push(empty_file_warning(path, "judgment"));
    }
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut set = JudgmentSet::new();
    for (line, rec) in records {
        let malformed = |message: String| CatalogError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let query_id =
            non_empty(rec.query_id).ok_or_else(|| malformed("missing query_id".into()))?;
        let product_id =
            non_empty(rec.product_id).ok_or_else(|| malformed("missing product_id".into()))?;
        let token = rec.label.ok_or_else(|| malformed("missing label".into()))?;
        let label: EsciLabel = token.parse().map_err(|_| CatalogError::UnknownLabel {
            path: path.to_path_buf(),
            line,
            token: token.clone(),
        })?;
        let split = match non_empty(rec.split) {
            Some(s) => s.parse().map_err(malformed)?,
            None => policy.assign(&query_id),
        };
        let origin = match non_empty(rec.origin).as_deref().map(str::to_ascii_lowercase) {
            None => Origin::Original,
            Some(o) if o == "original" => Origin::Original,
            Some(o) if o == "padded" => Origin::Padded,
            Some(o) => return Err(malformed(format!("unknown origin {o:?}"))),
        };
        if origin == Origin::Padded && label != EsciLabel::Irrelevant {
            return Err(malformed(format!("padded judgment with label {label}")));
        }
        let key = (query_id.clone(), product_id.clone());
        if let Some(&first_line) = seen.get(&key) {
            return Err(CatalogError::DuplicateJudgment {
                path: path.to_path_buf(),
                query_id,
                product_id,
                first_line,
                second_line: line,
            });
        }
        seen.insert(key, line);
        set.insert(Judgment {
            query_id,
            product_id,
            label,
            origin,
            split,
        })?;
    }
    Ok(Loaded {
        value: set,
        warnings,
    })
}

pub fn load_processed_queries(path: &Path) -> Result<ProcessedQuerySet> {
    let records: Vec<(usize, ProcessedQuery)> = read_records(path, Format::Jsonl)?;
    Ok(records
        .into_iter()
        .map(|(_, q)| (q.query_id.clone(), q))
        .collect())
}

/// Write any serializable records as JSONL.
pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let io_err = |source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub const PRODUCTS_FILE: &str = "products.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";

/// Write a dataset as three JSONL files in `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CatalogError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_jsonl(&dir.join(PRODUCTS_FILE), dataset.catalog().iter())?;
    write_jsonl(&dir.join(QUERIES_FILE), dataset.queries().iter())?;
    write_jsonl(&dir.join(JUDGMENTS_FILE), dataset.judgments().iter())
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, ValidationReport, Vec<String>)> {
    let products = load_products(&dir.join(PRODUCTS_FILE), Format::Jsonl)?;
    let queries = load_queries(&dir.join(QUERIES_FILE), Format::Jsonl)?;
    let judgments = load_judgments(&dir.join(JUDGMENTS_FILE), Format::Jsonl)?;
    let mut warnings = products.warnings;
    warnings.extend(queries.warnings);
    warnings.extend(judgments.warnings);
    let (dataset, report) = Dataset::build(products.value, queries.value, judgments.value)?;
    Ok((dataset, report, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn three_products_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            &dir,
            "p.jsonl",
            r#"{"product_id":"A","title":"a"}
{"product_id":"B","title":"b"}
{"product_id":"C","title":"c"}
"#,
        );
        let loaded = load_products(&path, Format::Jsonl).unwrap();
        assert_eq!(loaded.value.len(), 3);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn duplicate_product_cites_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        body.push_str("{\"product_id\":\"A0\",\"title\":\"x\"}\n");
        body.push_str("{\"product_id\":\"B01\",\"title\":\"x\"}\n");
        for i in 0..4 {
            body.push_str(&format!("{{\"product_id\":\"P{i}\",\"title\":\"x\"}}\n"));
        }
        body.push_str("{\"product_id\":\"B01\",\"title\":\"y\"}\n");
        let path = write_tmp(&dir, "p.jsonl", &body);
        match load_products(&path, Format::Jsonl) {
            Err(CatalogError::DuplicateProduct {
                id,
                first_line,
                second_line,
                ..
            }) => {
                assert_eq!(id, "B01");
                assert_eq!((first_line, second_line), (2, 7));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn missing_descriptions_default_to_empty() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..10 {
            if i == 3 || i == 8 {
                body.push_str(&format!("{{\"product_id\":\"P{i}\",\"title\":\"t{i}\"}}\n"));
            } else {
                body.push_str(&format!(
                    "{{\"product_id\":\"P{i}\",\"title\":\"t{i}\",\"description\":\"d{i}\"}}\n"
                ));
            }
        }
        let path = write_tmp(&dir, "p.jsonl", &body);
        let catalog = load_products(&path, Format::Jsonl).unwrap().value;
        assert_eq!(catalog.len(), 10);
        let empty: Vec<_> = catalog
            .iter()
            .filter(|p| p.description.is_empty())
            .map(|p| p.product_id.as_str())
            .collect();
        assert_eq!(empty, vec!["P3", "P8"]);
    }

    #[test]
    fn products_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            &dir,
            "p.csv",
            "product_id,title,description,bullet_points,brand,color,image_ref\nA,Red Dress,,,Acme,red,\nB,Blue Hat,warm,,,,img/b.jpg\n",
        );
        let catalog = load_products(&path, Format::Csv).unwrap().value;
        assert_eq!(catalog.len(), 2);
        assert_eq!(catalog.get("A").unwrap().image_ref, None);
        assert_eq!(catalog.get("B").unwrap().image_ref.as_deref(), Some("img/b.jpg"));
        assert_eq!(catalog.get("A").unwrap().brand, "Acme");
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "p.jsonl", "{\"product_id\":\"A\",\"title\":\"a\"}\n{oops\n");
        match load_products(&path, Format::Jsonl) {
            Err(CatalogError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let path = write_tmp(&dir, "q.jsonl", "{\"product_id\":\"A\"}\n");
        assert!(matches!(
            load_products(&path, Format::Jsonl),
            Err(CatalogError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_products(Path::new("/nonexistent/products.jsonl"), Format::Jsonl);
        assert!(matches!(err, Err(CatalogError::Io { .. })));
    }

    #[test]
    fn non_ascii_query_text_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            &dir,
            "q.jsonl",
            "{\"query_id\":\"q1\",\"text\":\"paws\"}\n{\"query_id\":\"q2\",\"text\":\"자전거트레일러\"}\n{\"query_id\":\"q3\",\"text\":\"眼镜框\"}\n",
        );
        let set = load_queries(&path, Format::Jsonl).unwrap().value;
        assert_eq!(set.len(), 3);
        assert_eq!(set.get("q2").unwrap().text.as_bytes(), "자전거트레일러".as_bytes());
    }

    #[test]
    fn empty_query_file_warns() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "q.jsonl", "");
        let loaded = load_queries(&path, Format::Jsonl).unwrap();
        assert!(loaded.value.is_empty());
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn duplicate_query_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "q.csv", "query_id,text\nq1,a\nq1,b\n");
        assert!(matches!(
            load_queries(&path, Format::Csv),
            Err(CatalogError::DuplicateQuery {
                first_line: 2,
                second_line: 3,
                ..
            })
        ));
    }

    #[test]
    fn label_parse_is_case_insensitive_and_total() {
        for (tok, label) in [
            ("E", EsciLabel::Exact),
            ("e", EsciLabel::Exact),
            ("S", EsciLabel::Substitute),
            ("s", EsciLabel::Substitute),
            ("C", EsciLabel::Complement),
            ("c", EsciLabel::Complement),
            ("I", EsciLabel::Irrelevant),
            ("i", EsciLabel::Irrelevant),
        ] {
            assert_eq!(tok.parse::<EsciLabel>().unwrap(), label);
            assert_eq!(label.to_string(), tok.to_ascii_uppercase());
        }
        for bad in ["X", "", "EE", "exact", "0"] {
            assert!(bad.parse::<EsciLabel>().is_err(), "{bad}");
        }
    }

    #[test]
    fn judgment_labels_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            &dir,
            "j.jsonl",
            r#"{"query_id":"baby bum rash cream","product_id":"P1","label":"e","split":"test"}
{"query_id":"baby bum rash cream","product_id":"P2","label":"S","split":"test"}
{"query_id":"baby bum rash cream","product_id":"P3","label":"C","split":"test"}
{"query_id":"baby bum rash cream","product_id":"P4","label":"I","split":"test"}
"#,
        );
        let set = load_judgments(&path, Format::Jsonl).unwrap().value;
        assert_eq!(set.len(), 4);
        let labels: Vec<_> = set.for_query("baby bum rash cream").iter().map(|j| j.label).collect();
        assert_eq!(labels, EsciLabel::ALL.to_vec());
        assert!(set.iter().all(|j| j.origin == Origin::Original));

        let bad = write_tmp(
            &dir,
            "bad.jsonl",
            "{\"query_id\":\"q\",\"product_id\":\"A\",\"label\":\"E\"}\n{\"query_id\":\"q\",\"product_id\":\"B\",\"label\":\"X\"}\n",
        );
        match load_judgments(&bad, Format::Jsonl) {
            Err(e @ CatalogError::UnknownLabel { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("\"X\"") && msg.contains(":2:"), "{msg}");
            }
            other => panic!("{other:?}"),
        }

        let dup = write_tmp(&dir, "dup.csv", "query_id,product_id,label,split\nq,A,E,train\nq,A,S,train\n");
        assert!(matches!(
            load_judgments(&dup, Format::Csv),
            Err(CatalogError::DuplicateJudgment { .. })
        ));
    }

    #[test]
    fn missing_split_uses_hash_policy() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("query_id,product_id,label\n");
        for q in 0..200 {
            body.push_str(&format!("q{q},P,E\n"));
        }
        let path = write_tmp(&dir, "j.csv", &body);
        let set = load_judgments(&path, Format::Csv).unwrap().value;
        let train = set.iter().filter(|j| j.split == Split::Train).count();
        assert!((130..=190).contains(&train), "train = {train}");
        let again = load_judgments(&path, Format::Csv).unwrap().value;
        assert_eq!(set, again);
        let all_test = load_judgments_with(&path, Format::Csv, &SplitPolicy { train_fraction: 0.0 })
            .unwrap()
            .value;
        assert!(all_test.iter().all(|j| j.split == Split::Test));
    }

    fn tiny() -> (Catalog, QuerySet, JudgmentSet) {
        let catalog =
            Catalog::from_products(["A", "B"].map(|id| Product::new(id, format!("title {id}")))).unwrap();
        let queries = QuerySet::from_queries([Query::new("q1", "one"), Query::new("q2", "two")]).unwrap();
        let judgments = JudgmentSet::from_judgments([
            Judgment::original("q1", "A", EsciLabel::Exact, Split::Test),
            Judgment::original("q2", "B", EsciLabel::Irrelevant, Split::Train),
        ])
        .unwrap();
        (catalog, queries, judgments)
    }

    #[test]
    fn consistent_fixture_validates_clean() {
        let (c, q, j) = tiny();
        assert!(validate_dataset(&c, &q, &j).is_clean());
    }

    #[test]
    fn dangling_product_is_named() {
        let (c, q, mut j) = tiny();
        j.insert(Judgment::original("q1", "ZZZ", EsciLabel::Exact, Split::Test)).unwrap();
        let report = validate_dataset(&c, &q, &j);
        assert_eq!(report.dangling_product_ids, vec!["ZZZ".to_string()]);
        assert!(matches!(Dataset::build(c, q, j), Err(CatalogError::Dangling(_))));
    }

    #[test]
    fn orphan_query_is_dropped() {
        let (c, mut q, j) = tiny();
        q.insert(Query::new("orphan", "nobody judged me")).unwrap();
        let (dataset, report) = Dataset::build(c, q, j).unwrap();
        assert_eq!(report.dropped_queries(), 1);
        assert_eq!(report.empty_queries, vec!["orphan".to_string()]);
        assert_eq!(dataset.queries().len(), 2);
    }

    #[test]
    fn dataset_round_trip() {
        let (mut c, q, j) = tiny();
        let mut p = c.get("A").unwrap().clone();
        p.image_ref = Some("img/a.jpg".into());
        p.generated_tags = Some(GeneratedTags {
            tags: vec!["red".into()],
            provenance: Provenance {
                provider_id: "stub".into(),
                model_id: "m".into(),
                prompt_hash: "h".into(),
            },
        });
        c.upsert(p);
        let (dataset, _) = Dataset::build(c, q, j).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &dataset).unwrap();
        let (again, report, warnings) = read_dataset(dir.path()).unwrap();
        assert!(report.is_clean());
        assert!(warnings.is_empty());
        assert_eq!(dataset, again);
    }
}
