//! Report model and emitters: aligned text tables, a JSONL record stream,
//! the full JSON report and per-approach plot series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Approach, ExperimentConfig, Result, RunnerError};
use crate::dataset_ops::{render_aligned, render_label_stats_table, LabelStats};
use crate::metrics::{EvalSummary, GainScheme, KPolicy, Weighting};
use crate::provider::ProviderIdentity;

/// Published full-corpus numbers for the similarity-backend comparison,
/// kept for orientation; desk-scale fixtures are not expected to match.
pub const FULL_CORPUS_REFERENCE: &str =
    "full-corpus reference at pad size 20: bi_encoder 0.740, cross_encoder 0.750 (not reproducible on small fixtures)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub approach: Approach,
    pub pad_size: usize,
    pub preprocessing: bool,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadLabelStats {
    pub pad_size: usize,
    /// Statistics of the run-0 padded dataset.
    pub stats: LabelStats,
    pub exhaustion_warnings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSeed {
    pub pad_size: usize,
    pub run: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub products: usize,
    pub queries: usize,
    pub judgments: usize,
    pub pool_products: usize,
    pub eval_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub seed: u64,
    pub pad_seeds: Vec<PadSeed>,
    /// Capability route → provider and model actually used.
    pub providers: BTreeMap<String, ProviderIdentity>,
    pub prompt_hashes: BTreeMap<String, String>,
    pub dataset: DatasetSizes,
    pub enrichment_failures: usize,
    pub preprocess_fallbacks: usize,
}

/// Self-describing experiment result. Re-running from `config` under stub
/// providers reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<ReportCell>,
    pub label_stats: Vec<PadLabelStats>,
    pub gain_scheme: GainScheme,
    pub k: KPolicy,
    pub weighting: Weighting,
    pub provenance: ReportProvenance,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub pad_size: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<PlotPoint>,
}

impl ExperimentReport {
    pub fn cell(&self, approach: Approach, pad_size: usize, preprocessing: bool) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.approach == approach && c.pad_size == pad_size && c.preprocessing == preprocessing)
    }

    /// Mean nDCG of a cell with raw queries.
    pub fn mean(&self, approach: Approach, pad_size: usize) -> Option<f64> {
        self.cell(approach, pad_size, false).map(|c| c.summary.mean)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(raw: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| RunnerError::Report {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&raw).map_err(|e| RunnerError::Report {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn show_flag(&self) -> bool {
        self.cells.iter().any(|c| c.preprocessing)
    }

    fn row_label(&self, cell: &ReportCell) -> String {
        match (self.show_flag(), cell.preprocessing) {
            (true, true) => format!("{} +preprocessing", cell.approach),
            _ => cell.approach.to_string(),
        }
    }

    /// Rows of the grid in report order: (label, approach, flag).
    fn rows(&self) -> Vec<(String, Approach, bool)> {
        let mut rows: Vec<(String, Approach, bool)> = Vec::new();
        for c in &self.cells {
            if !rows.iter().any(|r| r.1 == c.approach && r.2 == c.preprocessing) {
                rows.push((self.row_label(c), c.approach, c.preprocessing));
            }
        }
        rows
    }

    fn pad_sizes(&self) -> Vec<usize> {
        let mut pads: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !pads.contains(&c.pad_size) {
                pads.push(c.pad_size);
            }
        }
        pads
    }

    /// One series per grid row, points ordered by pad size.
    pub fn plot_series(&self) -> Vec<PlotSeries> {
        self.rows()
            .into_iter()
            .map(|(name, approach, flag)| {
                let mut points: Vec<PlotPoint> = self
                    .cells
                    .iter()
                    .filter(|c| c.approach == approach && c.preprocessing == flag)
                    .map(|c| PlotPoint {
                        pad_size: c.pad_size,
                        mean: c.summary.mean,
                        min: c.summary.min,
                        max: c.summary.max,
                    })
                    .collect();
                points.sort_by_key(|p| p.pad_size);
                PlotSeries { name, points }
            })
            .collect()
    }
}

fn render_grid(report: &ExperimentReport, cell_text: impl Fn(&EvalSummary) -> String) -> String {
    let pads = report.pad_sizes();
    let mut header = vec!["Approach".to_string()];
    header.extend(pads.iter().map(|p| format!("PadSize={p}")));
    let mut rows = vec![header];
    for (label, approach, flag) in report.rows() {
        let mut row = vec![label];
        for &pad in &pads {
            row.push(
                report
                    .cell(approach, pad, flag)
                    .map(|c| cell_text(&c.summary))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        rows.push(row);
    }
    render_aligned(&rows)
}

/// Mean nDCG per (approach, pad size).
pub fn render_mean_table(report: &ExperimentReport) -> String {
    render_grid(report, |s| format!("{:.4}", s.mean))
}

/// Mean with the min–max range across runs.
pub fn render_range_table(report: &ExperimentReport) -> String {
    render_grid(report, |s| format!("{:.4} [{:.4}, {:.4}]", s.mean, s.min, s.max))
}

fn render_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Mean nDCG ({} runs, gains E={} S={} C={} I={}, k={}, {:?})\n",
        report.config.runs,
        report.gain_scheme.as_array()[0],
        report.gain_scheme.as_array()[1],
        report.gain_scheme.as_array()[2],
        report.gain_scheme.as_array()[3],
        report.k,
        report.weighting,
    ));
    out.push_str(&render_mean_table(report));
    out.push_str("\nRange across runs\n");
    out.push_str(&render_range_table(report));
    if !report.label_stats.is_empty() {
        out.push_str("\nLabel distribution\n");
        let cols: Vec<(usize, LabelStats)> = report
            .label_stats
            .iter()
            .map(|s| (s.pad_size, s.stats.clone()))
            .collect();
        out.push_str(&render_label_stats_table(&cols));
    }
    let skipped: usize = report.cells.iter().map(|c| c.summary.skipped_queries).max().unwrap_or(0);
    out.push_str(&format!(
        "\nEvaluated queries: {}; skipped (no positive gain): at most {skipped} per run\n",
        report.provenance.dataset.eval_queries
    ));
    for note in &report.notes {
        out.push_str(&format!("Note: {note}\n"));
    }
    out
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|source| RunnerError::Output {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Write `results.txt`, `cells.jsonl`, `report.json`, `plot_data.json` and
/// `config.toml` into `dir`. Returns the written paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.cells.is_empty() {
        return Err(RunnerError::EmptyGrid);
    }
    std::fs::create_dir_all(dir).map_err(|source| RunnerError::Output {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut records = String::new();
    for cell in &report.cells {
        records.push_str(&serde_json::to_string(cell).expect("cell serializes"));
        records.push('\n');
    }
    let plot = serde_json::to_string_pretty(&report.plot_series()).expect("plot data serializes") + "\n";
    Ok(vec![
        write(dir.join("results.txt"), &render_text(report))?,
        write(dir.join("cells.jsonl"), &records)?,
        write(dir.join("report.json"), &report.to_json())?,
        write(dir.join("plot_data.json"), &plot)?,
        write(dir.join("config.toml"), &report.config.to_toml_string())?,
    ])
}
