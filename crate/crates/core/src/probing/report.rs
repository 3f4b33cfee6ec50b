//! Machine-readable results plus a plain-text table, and merging several
//! reports into one side-by-side comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::guided::GuidedRun;
use super::itm::ItmResult;
use super::ProbeConfig;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub n_samples: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Rows dropped by the loader.
    pub n_malformed: usize,
}

/// Everything one probing run produced. Contains no timestamps or paths that
/// vary between identical runs; those live in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema: u32,
    pub tool_version: String,
    pub backend: String,
    pub dataset: DatasetSummary,
    pub config: ProbeConfig,
    pub guided: Option<GuidedRun>,
    pub itm: Vec<ItmResult>,
    pub notes: Vec<String>,
}

impl ProbeReport {
    pub fn new(backend: impl Into<String>, dataset: DatasetSummary, config: ProbeConfig) -> Self {
        ProbeReport {
            schema: REPORT_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            backend: backend.into(),
            dataset,
            config,
            guided: None,
            itm: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Human-readable tables: guided-masking conditions by accuracy at each
/// cutoff, then matching accuracy split by pair label.
pub fn format_table(report: &ProbeReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "backend: {}  dataset: {} ({} samples, {} positive, {} negative)",
        report.backend,
        report.dataset.name,
        report.dataset.n_samples,
        report.dataset.n_positive,
        report.dataset.n_negative
    );
    if let Some(g) = &report.guided {
        let ks = report.config.all_ks();
        let _ = writeln!(out, "\nguided masking (top-k accuracy, %; headline k = {})", report.config.k);
        let mut header = format!("{:<18} {:>9} {:>8}", "condition", "evaluated", "skipped");
        for k in &ks {
            let _ = write!(header, " {:>7}", format!("top-{k}"));
        }
        let _ = write!(header, " {:>9}", "fallback");
        let _ = writeln!(out, "{header}");
        for r in &g.results {
            let mut line = format!("{:<18} {:>9} {:>8}", r.condition.as_str(), r.n_evaluated, r.n_skipped);
            for k in &ks {
                let acc = r.at_k.iter().find(|c| c.k == *k).map_or(0.0, |c| c.accuracy);
                let _ = write!(line, " {:>7}", pct(acc));
            }
            let _ = write!(line, " {:>9}", r.fallback_subject_count);
            let _ = writeln!(out, "{line}");
        }
    }
    if !report.itm.is_empty() {
        let _ = writeln!(out, "\nimage-text matching (accuracy, %; threshold {})", report.config.itm_threshold);
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>8} {:>9} {:>9} {:>8} {:>9}",
            "ablation", "n_pos", "n_neg", "average", "positive", "negative", "skipped", "fallback"
        );
        for r in &report.itm {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>6} {:>8} {:>9} {:>9} {:>8} {:>9}",
                r.ablation.as_str(),
                r.n_pos,
                r.n_neg,
                pct(r.acc_avg),
                pct(r.acc_pos),
                pct(r.acc_neg),
                r.n_skipped,
                r.fallback_subject_count
            );
        }
    }
    for note in &report.notes {
        let _ = writeln!(out, "\nnote: {note}");
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt` and returns both paths.
pub fn emit_report(report: &ProbeReport, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let stem = stem.as_ref();
    let json = stem.with_extension("json");
    let txt = stem.with_extension("txt");
    fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    fs::write(&txt, format_table(report)).map_err(|e| Error::io(&txt, e))?;
    Ok((json, txt))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ProbeReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: ProbeReport =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if report.schema != REPORT_SCHEMA {
        return Err(Error::Schema(format!("{}: unsupported report schema {}", path.display(), report.schema)));
    }
    Ok(report)
}

/// One row per backend and condition (guided masking), then one row per
/// backend and ablation (matching).
pub fn merge_reports(reports: &[ProbeReport]) -> String {
    let mut out = String::new();
    let guided: Vec<&ProbeReport> = reports.iter().filter(|r| r.guided.is_some()).collect();
    if !guided.is_empty() {
        let _ = writeln!(
            out,
            "{:<24} {:<18} {:<18} {:>3} {:>9} {:>8} {:>8}",
            "backend", "dataset", "condition", "k", "evaluated", "skipped", "accuracy"
        );
        for r in guided {
            for c in &r.guided.as_ref().expect("filtered").results {
                let _ = writeln!(
                    out,
                    "{:<24} {:<18} {:<18} {:>3} {:>9} {:>8} {:>8}",
                    r.backend,
                    r.dataset.name,
                    c.condition.as_str(),
                    c.k,
                    c.n_evaluated,
                    c.n_skipped,
                    pct(c.accuracy)
                );
            }
        }
    }
    let itm: Vec<&ProbeReport> = reports.iter().filter(|r| !r.itm.is_empty()).collect();
    if !itm.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{:<24} {:<18} {:<10} {:>8} {:>9} {:>9}",
            "backend", "dataset", "ablation", "average", "positive", "negative"
        );
        for r in itm {
            for i in &r.itm {
                let _ = writeln!(
                    out,
                    "{:<24} {:<18} {:<10} {:>8} {:>9} {:>9}",
                    r.backend,
                    r.dataset.name,
                    i.ablation.as_str(),
                    pct(i.acc_avg),
                    pct(i.acc_pos),
                    pct(i.acc_neg)
                );
            }
        }
    }
    out
}
