//! Results files (JSON) and the fold table rendered from them.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use bam_core::eval::{SeedMean, SweepPoint};
use bam_core::metrics::MetricsRecord;
use serde::{Deserialize, Serialize};

/// Everything one or more evaluation runs produced. Appending a run
/// replaces earlier entries with the same method, fold and shot count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub records: Vec<MetricsRecord>,
    pub means: Vec<SeedMean>,
    pub sweeps: Vec<SweepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    pub fold: usize,
    pub shots: usize,
    pub points: Vec<SweepPoint>,
}

impl ResultsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn add_run(&mut self, records: &[MetricsRecord], mean: &SeedMean) {
        let same = |m: &str, f: usize, k: usize| m == mean.method && f == mean.fold && k == mean.shots;
        self.records.retain(|r| !same(&r.method, r.fold, r.shots));
        self.means.retain(|r| !same(&r.method, r.fold, r.shots));
        self.records.extend_from_slice(records);
        self.means.push(mean.clone());
    }

    pub fn add_sweep(&mut self, sweep: SweepRecord) {
        self.sweeps
            .retain(|s| !(s.method == sweep.method && s.fold == sweep.fold && s.shots == sweep.shots));
        self.sweeps.push(sweep);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Miou,
    FbIou,
    MiouN,
    MiouB,
    MiouA,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Miou => "mIoU",
            Metric::FbIou => "FB-IoU",
            Metric::MiouN => "mIoU_n",
            Metric::MiouB => "mIoU_b",
            Metric::MiouA => "mIoU_a",
        }
    }

    pub fn of(self, m: &SeedMean) -> Option<f64> {
        match self {
            Metric::Miou => Some(m.miou),
            Metric::FbIou => Some(m.fb_iou),
            Metric::MiouN => m.miou_n,
            Metric::MiouB => m.miou_b,
            Metric::MiouA => m.miou_a,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Option<f64>>,
    /// Mean over the filled cells.
    pub mean: Option<f64>,
}

/// Rows are method and shot count, columns are folds.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub metric: Metric,
    pub folds: Vec<usize>,
    pub rows: Vec<TableRow>,
}

impl ResultsTable {
    pub fn build(means: &[SeedMean], metric: Metric) -> Self {
        let mut folds: Vec<usize> = means.iter().map(|m| m.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        let mut keys: Vec<(String, usize)> = Vec::new();
        for m in means {
            if metric.of(m).is_some() && !keys.contains(&(m.method.clone(), m.shots)) {
                keys.push((m.method.clone(), m.shots));
            }
        }
        let rows = keys
            .into_iter()
            .map(|(method, shots)| {
                let cells: Vec<Option<f64>> = folds
                    .iter()
                    .map(|&f| {
                        means
                            .iter()
                            .find(|m| m.method == method && m.shots == shots && m.fold == f)
                            .and_then(|m| metric.of(m))
                    })
                    .collect();
                let filled: Vec<f64> = cells.iter().flatten().copied().collect();
                let mean = (!filled.is_empty()).then(|| filled.iter().sum::<f64>() / filled.len() as f64);
                TableRow {
                    label: format!("{method} ({shots}-shot)"),
                    cells,
                    mean,
                }
            })
            .collect();
        ResultsTable { metric, folds, rows }
    }

    /// Percentages with two decimals.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(self.metric.label().len());
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", self.metric.label());
        for f in &self.folds {
            let _ = write!(out, " {:>8}", format!("fold-{f}"));
        }
        let _ = writeln!(out, " {:>8}", "mean");
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.label);
            for c in &r.cells {
                let _ = write!(out, " {:>8}", cell(*c));
            }
            let _ = writeln!(out, " {:>8}", cell(r.mean));
        }
        out
    }
}
