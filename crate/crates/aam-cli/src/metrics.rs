//! Metrics log: one JSON record per optimizer step, and the JSON shape
//! of evaluation reports and comparison tables.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use aam_core::eval::{CompareRow, ComparisonTable, EvalReport};
use aam_core::trainer::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepJson {
    pub step: usize,
    pub mode: String,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    pub margin: f64,
    pub bt_loss: f64,
    pub sft_loss_chosen: f64,
    pub sft_loss_rejected: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub margin_clips: usize,
}

impl From<&StepRecord> for StepJson {
    fn from(r: &StepRecord) -> Self {
        StepJson {
            step: r.step,
            mode: r.mode.clone(),
            reward_chosen: r.report.reward_chosen,
            reward_rejected: r.report.reward_rejected,
            margin: r.report.margin,
            bt_loss: r.report.bt_loss,
            sft_loss_chosen: r.report.sft_loss_chosen,
            sft_loss_rejected: r.report.sft_loss_rejected,
            total: r.report.total,
            grad_norm: r.grad_norm,
            margin_clips: r.margin_clips,
        }
    }
}

fn json_error(e: serde_json::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

pub fn save_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&StepJson::from(record)).map_err(json_error)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_metrics(path: &Path) -> Result<Vec<StepJson>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| {
            CliError::Core(aam_core::Error::Contract(format!(
                "metrics `{}` line {}: {e}",
                path.display(),
                lineno + 1
            )))
        })?);
    }
    Ok(records)
}

// ── evaluation reports ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalJson {
    pub label: String,
    pub pairwise_accuracy: f64,
    pub accuracy_on_ambiguous: Option<f64>,
    pub accuracy_on_clear: Option<f64>,
    pub margin_gap_spearman: Option<f64>,
    pub n_pairs: usize,
    pub n_ambiguous: usize,
    /// Corpus fingerprint as fixed-width hex.
    pub corpus_fingerprint: String,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        EvalJson {
            label: r.label.clone(),
            pairwise_accuracy: r.pairwise_accuracy,
            accuracy_on_ambiguous: r.accuracy_on_ambiguous,
            accuracy_on_clear: r.accuracy_on_clear,
            margin_gap_spearman: r.margin_gap_spearman,
            n_pairs: r.n_pairs,
            n_ambiguous: r.n_ambiguous,
            corpus_fingerprint: format!("{:016x}", r.corpus_fingerprint),
        }
    }
}

impl EvalJson {
    pub fn into_report(self) -> Result<EvalReport> {
        let fingerprint = u64::from_str_radix(&self.corpus_fingerprint, 16).map_err(|_| {
            CliError::Core(aam_core::Error::Contract(format!(
                "bad corpus fingerprint `{}`",
                self.corpus_fingerprint
            )))
        })?;
        Ok(EvalReport {
            label: self.label,
            pairwise_accuracy: self.pairwise_accuracy,
            accuracy_on_ambiguous: self.accuracy_on_ambiguous,
            accuracy_on_clear: self.accuracy_on_clear,
            margin_gap_spearman: self.margin_gap_spearman,
            n_pairs: self.n_pairs,
            n_ambiguous: self.n_ambiguous,
            corpus_fingerprint: fingerprint,
        })
    }
}

pub fn save_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(&EvalJson::from(report)).map_err(json_error)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_eval_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read report `{}`: {e}", path.display()))
    })?;
    let json: EvalJson = serde_json::from_str(&text).map_err(|e| {
        CliError::Core(aam_core::Error::Contract(format!(
            "report `{}`: {e}",
            path.display()
        )))
    })?;
    json.into_report()
}

// ── comparison tables ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRowJson {
    pub label: String,
    pub accuracy: f64,
    pub accuracy_on_ambiguous: Option<f64>,
    pub accuracy_on_clear: Option<f64>,
    pub margin_gap_spearman: Option<f64>,
    pub delta_accuracy: f64,
    pub best: bool,
}

impl From<&CompareRow> for CompareRowJson {
    fn from(r: &CompareRow) -> Self {
        CompareRowJson {
            label: r.label.clone(),
            accuracy: r.accuracy,
            accuracy_on_ambiguous: r.accuracy_on_ambiguous,
            accuracy_on_clear: r.accuracy_on_clear,
            margin_gap_spearman: r.margin_gap_spearman,
            delta_accuracy: r.delta_accuracy,
            best: r.best,
        }
    }
}

pub fn save_compare_rows(path: &Path, table: &ComparisonTable) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for row in &table.rows {
        let line = serde_json::to_string(&CompareRowJson::from(row)).map_err(json_error)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Aligned plain-text rendering of a comparison table.
pub fn render_compare_table(table: &ComparisonTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("corpus fingerprint: {:016x}\n", table.corpus_fingerprint));
    out.push_str(&format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>5}\n",
        "label", "accuracy", "ambig", "clear", "spearman", "delta", "best"
    ));
    for row in &table.rows {
        out.push_str(&format!(
            "{:<12} {:>9.4} {:>9} {:>9} {:>9} {:>+9.4} {:>5}\n",
            row.label,
            row.accuracy,
            fmt_opt(row.accuracy_on_ambiguous),
            fmt_opt(row.accuracy_on_clear),
            fmt_opt(row.margin_gap_spearman),
            row.delta_accuracy,
            if row.best { "*" } else { "" },
        ));
    }
    out
}
