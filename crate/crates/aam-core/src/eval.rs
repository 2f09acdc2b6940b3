//! Held-out evaluation: pairwise accuracy and margin calibration.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{corpus_fingerprint, PreferencePair};
use crate::error::{Error, Result};
use crate::losses::{ld_margin, pr_margin, MarginMode, MarginSpec};
use crate::model::{reward_score, ModelParams, ReferenceSnapshot};

/// Evaluation summary for one model on one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    /// Fraction of pairs scoring chosen above rejected; ties count 0.5.
    pub pairwise_accuracy: f64,
    /// Stratified accuracies, present when the corpus carries meta.
    pub accuracy_on_ambiguous: Option<f64>,
    pub accuracy_on_clear: Option<f64>,
    /// Spearman correlation between |margin| and true gap, when computed.
    pub margin_gap_spearman: Option<f64>,
    pub n_pairs: usize,
    pub n_ambiguous: usize,
    pub corpus_fingerprint: u64,
}

/// Score every pair with the reward head. `train_fingerprint`, when
/// given, guards against evaluating on the training corpus.
pub fn pairwise_accuracy(
    model: &ModelParams,
    corpus: &[PreferencePair],
    label: &str,
    train_fingerprint: Option<u64>,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("evaluation corpus is empty".into()));
    }
    let fingerprint = corpus_fingerprint(corpus);
    if train_fingerprint == Some(fingerprint) {
        return Err(Error::Contamination(format!(
            "evaluation corpus matches training corpus (fingerprint {fingerprint:016x})"
        )));
    }

    let mut total = 0.0;
    let mut amb = (0.0, 0usize);
    let mut clear = (0.0, 0usize);
    let mut have_meta = true;
    for pair in corpus {
        let rc = reward_score(model, &pair.prompt, &pair.chosen)?;
        let rr = reward_score(model, &pair.prompt, &pair.rejected)?;
        let credit = if rc > rr {
            1.0
        } else if rc < rr {
            0.0
        } else {
            0.5
        };
        total += credit;
        match pair.meta {
            Some(meta) if meta.ambiguous => {
                amb.0 += credit;
                amb.1 += 1;
            }
            Some(_) => {
                clear.0 += credit;
                clear.1 += 1;
            }
            None => have_meta = false,
        }
    }
    let n = corpus.len();
    Ok(EvalReport {
        label: label.into(),
        pairwise_accuracy: total / n as f64,
        accuracy_on_ambiguous: (have_meta && amb.1 > 0).then(|| amb.0 / amb.1 as f64),
        accuracy_on_clear: (have_meta && clear.1 > 0).then(|| clear.0 / clear.1 as f64),
        margin_gap_spearman: None,
        n_pairs: n,
        n_ambiguous: amb.1,
        corpus_fingerprint: fingerprint,
    })
}

/// Spearman rank correlation between |margin| and the planted gap.
pub fn margin_calibration(
    model: &ModelParams,
    reference: Option<&ReferenceSnapshot>,
    corpus: &[PreferencePair],
    spec: &MarginSpec,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("calibration corpus is empty".into()));
    }
    let mut margins = Vec::with_capacity(corpus.len());
    let mut gaps = Vec::with_capacity(corpus.len());
    for pair in corpus {
        let meta = pair.meta.ok_or_else(|| {
            Error::Contract("margin calibration needs ground-truth gaps in meta".into())
        })?;
        let m = match spec.mode {
            MarginMode::Pr => {
                let reference = reference.ok_or_else(|| {
                    Error::Contract("PR calibration requires a reference snapshot".into())
                })?;
                pr_margin(model, reference, pair, spec)?
            }
            MarginMode::Ld => ld_margin(model, pair, spec)?,
            other => {
                return Err(Error::Contract(format!(
                    "margin calibration needs mode pr or ld, got {}",
                    other.as_str()
                )))
            }
        };
        margins.push(libm::fabs(m));
        gaps.push(meta.true_gap);
    }
    spearman(&margins, &gaps)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("spearman needs two equal-length series of >= 2 points".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Contract("correlation undefined for a constant series".into()));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

// ── run comparison ──────────────────────────────────────────────────

/// One row per report, with deltas against the first row.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub accuracy: f64,
    pub accuracy_on_ambiguous: Option<f64>,
    pub accuracy_on_clear: Option<f64>,
    pub margin_gap_spearman: Option<f64>,
    /// Delta of accuracy vs. the first report.
    pub delta_accuracy: f64,
    /// Best-in-column flag for overall accuracy.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub corpus_fingerprint: u64,
    pub rows: Vec<CompareRow>,
}

/// Side-by-side accuracies. All reports must share a corpus fingerprint.
pub fn compare_runs(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("compare_runs needs at least one report".into()))?;
    for r in reports {
        if r.corpus_fingerprint != first.corpus_fingerprint {
            return Err(Error::Comparability(format!(
                "report `{}` evaluates fingerprint {:016x}, expected {:016x}",
                r.label, r.corpus_fingerprint, first.corpus_fingerprint
            )));
        }
    }
    let best = reports
        .iter()
        .map(|r| r.pairwise_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let rows = reports
        .iter()
        .map(|r| CompareRow {
            label: r.label.clone(),
            accuracy: r.pairwise_accuracy,
            accuracy_on_ambiguous: r.accuracy_on_ambiguous,
            accuracy_on_clear: r.accuracy_on_clear,
            margin_gap_spearman: r.margin_gap_spearman,
            delta_accuracy: r.pairwise_accuracy - first.pairwise_accuracy,
            best: r.pairwise_accuracy == best,
        })
        .collect();
    Ok(ComparisonTable { corpus_fingerprint: first.corpus_fingerprint, rows })
}
