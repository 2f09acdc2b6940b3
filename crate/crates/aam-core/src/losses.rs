//! Bradley-Terry loss family with act-adaptive margins.
//!
//! The margin is subtracted from the reward difference inside the BT
//! sigmoid. Two adaptive forms are supported:
//!
//! - PR (probability ratio): beta * [(log pi - log pi_ref)(y_w)
//!   - (log pi - log pi_ref)(y_l)], zero at the reference snapshot.
//! - LD (loss difference): beta * [mean-per-token log pi(y_w) -
//!   mean-per-token log pi(y_l)], equal to the difference of the two
//!   beta-scaled per-token SFT losses.
//!
//! Margins are clipped to [-MARGIN_CLIP, MARGIN_CLIP] before entering the
//! sigmoid; clip hits are counted in the loss output. By default the
//! margin is treated as a per-batch constant (no gradient flows through
//! the LM head from the margin term); `block_margin_gradient = false`
//! lets it flow.

use alloc::format;
use alloc::vec::Vec;

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{
    score_pair_taped, sequence_logprob, token_logprobs, ModelParams, ReferenceSnapshot, TapedParams,
    TokenSeq,
};
use crate::tape::{log_sigmoid, sigmoid, Id, Tape};

/// Clip bound on margins entering the sigmoid.
pub const MARGIN_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginMode {
    None,
    Fixed,
    Pr,
    Ld,
}

impl MarginMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MarginMode::None => "none",
            MarginMode::Fixed => "fixed",
            MarginMode::Pr => "pr",
            MarginMode::Ld => "ld",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MarginMode::None),
            "fixed" => Ok(MarginMode::Fixed),
            "pr" => Ok(MarginMode::Pr),
            "ld" => Ok(MarginMode::Ld),
            other => Err(Error::Contract(format!("unknown margin mode `{other}`"))),
        }
    }
}

/// Which margin to apply, its scale, and its gradient-flow policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSpec {
    pub mode: MarginMode,
    pub beta: f64,
    /// Used only in fixed mode.
    pub fixed_value: f64,
    /// When true (default) the margin is a per-batch constant.
    pub block_margin_gradient: bool,
}

impl Default for MarginSpec {
    fn default() -> Self {
        MarginSpec { mode: MarginMode::None, beta: 0.1, fixed_value: 0.0, block_margin_gradient: true }
    }
}

impl MarginSpec {
    pub fn none() -> Self {
        MarginSpec::default()
    }

    pub fn fixed(value: f64) -> Self {
        MarginSpec { mode: MarginMode::Fixed, fixed_value: value, ..MarginSpec::default() }
    }

    pub fn pr(beta: f64) -> Self {
        MarginSpec { mode: MarginMode::Pr, beta, ..MarginSpec::default() }
    }

    pub fn ld(beta: f64) -> Self {
        MarginSpec { mode: MarginMode::Ld, beta, ..MarginSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Contract(format!("beta {} must be positive", self.beta)));
        }
        if self.mode == MarginMode::Fixed && !self.fixed_value.is_finite() {
            return Err(Error::Contract("fixed margin must be finite".into()));
        }
        Ok(())
    }
}

/// Which responses the SFT regularizer covers. The underlying objective
/// is unstated in the source formulation; chosen-only is the default and
/// the alternative stays one switch away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SftTarget {
    #[default]
    Chosen,
    Both,
}

impl SftTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            SftTarget::Chosen => "chosen",
            SftTarget::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chosen" => Ok(SftTarget::Chosen),
            "both" => Ok(SftTarget::Both),
            other => Err(Error::Contract(format!("unknown sft target `{other}`"))),
        }
    }
}

/// Per-batch loss decomposition (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    pub margin: f64,
    pub bt_loss: f64,
    pub sft_loss_chosen: f64,
    pub sft_loss_rejected: f64,
    pub total: f64,
}

// ── scalar loss family ──────────────────────────────────────────────

/// P(y_w > y_l) = exp(r_w) / (exp(r_w) + exp(r_l)), computed in the
/// stable form sigmoid(r_w - r_l).
pub fn bt_preference_prob(r_w: f64, r_l: f64) -> Result<f64> {
    if !r_w.is_finite() || !r_l.is_finite() {
        return Err(Error::Numeric(format!("non-finite rewards ({r_w}, {r_l})")));
    }
    Ok(sigmoid(r_w - r_l))
}

/// Mean over the batch of -log sigmoid(r_w - r_l).
pub fn bt_loss(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("bt_loss of empty batch".into()));
    }
    let sum: f64 = pairs.iter().map(|&(w, l)| -log_sigmoid(w - l)).sum();
    Ok(sum / pairs.len() as f64)
}

/// Mean over the batch of -log sigmoid(r_w - r_l - M). Reduces exactly to
/// [`bt_loss`] when every margin is zero.
pub fn margin_bt_loss(triples: &[(f64, f64, f64)]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Contract("margin_bt_loss of empty batch".into()));
    }
    for &(w, l, m) in triples {
        if !w.is_finite() || !l.is_finite() || !m.is_finite() {
            return Err(Error::Numeric(format!("non-finite inputs ({w}, {l}, {m})")));
        }
    }
    let sum: f64 = triples.iter().map(|&(w, l, m)| -log_sigmoid(w - l - m)).sum();
    Ok(sum / triples.len() as f64)
}

// ── adaptive margins ────────────────────────────────────────────────

/// Probability-ratio margin: beta * [(log pi - log pi_ref)(y_w) -
/// (log pi - log pi_ref)(y_l)]. Unclipped; clipping happens where the
/// margin enters the sigmoid.
pub fn pr_margin(
    model: &ModelParams,
    reference: &ReferenceSnapshot,
    pair: &PreferencePair,
    spec: &MarginSpec,
) -> Result<f64> {
    if spec.mode != MarginMode::Pr {
        return Err(Error::Contract("pr_margin requires mode == pr".into()));
    }
    spec.validate()?;
    let lp_w = sequence_logprob(model, &pair.prompt, &pair.chosen)?;
    let lp_l = sequence_logprob(model, &pair.prompt, &pair.rejected)?;
    let ref_w = sequence_logprob(reference.params(), &pair.prompt, &pair.chosen)?;
    let ref_l = sequence_logprob(reference.params(), &pair.prompt, &pair.rejected)?;
    Ok(pr_margin_from_logprobs(lp_w, ref_w, lp_l, ref_l, spec.beta))
}

/// Loss-difference margin: beta * [mean-token log pi(y_w) - mean-token
/// log pi(y_l)], each sum normalized by its own response length. Equals
/// sft_loss(y_l) - sft_loss(y_w) scaled by beta.
pub fn ld_margin(model: &ModelParams, pair: &PreferencePair, spec: &MarginSpec) -> Result<f64> {
    if spec.mode != MarginMode::Ld {
        return Err(Error::Contract("ld_margin requires mode == ld".into()));
    }
    spec.validate()?;
    let mean_w = mean_token_logprob(model, &pair.prompt, &pair.chosen)?;
    let mean_l = mean_token_logprob(model, &pair.prompt, &pair.rejected)?;
    Ok(ld_margin_from_means(mean_w, mean_l, spec.beta))
}

/// PR margin arithmetic on already-computed sequence log-probabilities.
pub fn pr_margin_from_logprobs(lp_w: f64, ref_w: f64, lp_l: f64, ref_l: f64, beta: f64) -> f64 {
    beta * ((lp_w - ref_w) - (lp_l - ref_l))
}

/// LD margin arithmetic on already-computed mean-per-token log-probabilities.
pub fn ld_margin_from_means(mean_w: f64, mean_l: f64, beta: f64) -> f64 {
    beta * (mean_w - mean_l)
}

fn mean_token_logprob(model: &ModelParams, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    let lps = token_logprobs(model, prompt, response)?;
    Ok(lps.iter().sum::<f64>() / lps.len() as f64)
}

/// Per-token mean negative log-likelihood of the response.
pub fn sft_loss(model: &ModelParams, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    Ok(-mean_token_logprob(model, prompt, response)?)
}

/// Diagnostic form of the KL-substituted objective's reward:
/// r - beta * (log pi(y|x) - log pi_ref(y|x)). Not used in training.
pub fn modified_reward(
    model: &ModelParams,
    reference: &ReferenceSnapshot,
    prompt: &TokenSeq,
    response: &TokenSeq,
    r: f64,
    beta: f64,
) -> Result<f64> {
    if !r.is_finite() || !beta.is_finite() {
        return Err(Error::Numeric(format!("non-finite inputs (r={r}, beta={beta})")));
    }
    let lp = sequence_logprob(model, prompt, response)?;
    let lp_ref = sequence_logprob(reference.params(), prompt, response)?;
    Ok(r - beta * (lp - lp_ref))
}

// ── full training loss on a tape ────────────────────────────────────

/// Result of assembling the full loss for one batch.
pub struct AamLoss {
    /// Scalar total on the tape; backward from here.
    pub total: Id,
    pub report: LossReport,
    /// Margins clipped to the [-MARGIN_CLIP, MARGIN_CLIP] bound.
    pub margin_clips: usize,
}

/// total = margin-BT loss over the batch + sft_weight * mean SFT loss of
/// the targeted responses. Margins follow `spec`; a reference snapshot is
/// required in PR mode.
pub fn aam_loss_taped(
    tape: &mut Tape,
    tp: &TapedParams,
    reference: Option<&ReferenceSnapshot>,
    batch: &[PreferencePair],
    spec: &MarginSpec,
    sft_weight: f64,
    sft_target: SftTarget,
) -> Result<AamLoss> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("aam_loss of empty batch".into()));
    }
    if sft_weight < 0.0 {
        return Err(Error::Contract(format!("sft_weight {sft_weight} must be >= 0")));
    }
    let ref_tp = match (spec.mode, reference) {
        (MarginMode::Pr, Some(r)) => Some(TapedParams::register(tape, r.params(), false)),
        (MarginMode::Pr, None) => {
            return Err(Error::Contract("PR margin requires a reference snapshot".into()))
        }
        _ => None,
    };

    let mut pair_losses = Vec::with_capacity(batch.len());
    let mut sft_terms = Vec::with_capacity(batch.len());
    let mut margin_clips = 0;

    let mut sum_rw = 0.0;
    let mut sum_rl = 0.0;
    let mut sum_margin = 0.0;
    let mut sum_bt = 0.0;
    let mut sum_sft_w = 0.0;
    let mut sum_sft_l = 0.0;

    for pair in batch {
        let scored_w = score_pair_taped(tape, tp, &pair.prompt, &pair.chosen)?;
        let scored_l = score_pair_taped(tape, tp, &pair.prompt, &pair.rejected)?;

        // margin node (constant when gradient-blocked)
        let margin_id: Id = match spec.mode {
            MarginMode::None => tape.scalar(0.0),
            MarginMode::Fixed => tape.scalar(spec.fixed_value.clamp(-MARGIN_CLIP, MARGIN_CLIP)),
            MarginMode::Ld => {
                let mean_w = tape.mean(scored_w.token_logprobs);
                let mean_l = tape.mean(scored_l.token_logprobs);
                if spec.block_margin_gradient {
                    let raw = spec.beta * (tape.value(mean_w).item() - tape.value(mean_l).item());
                    if raw.abs() > MARGIN_CLIP {
                        margin_clips += 1;
                    }
                    tape.scalar(raw.clamp(-MARGIN_CLIP, MARGIN_CLIP))
                } else {
                    let diff = tape.sub(mean_w, mean_l)?;
                    let m = tape.scale(diff, spec.beta);
                    if tape.value(m).item().abs() > MARGIN_CLIP {
                        margin_clips += 1;
                    }
                    tape.clamp(m, -MARGIN_CLIP, MARGIN_CLIP)
                }
            }
            MarginMode::Pr => {
                let ref_tp = ref_tp.as_ref().expect("checked above");
                let ref_w = score_pair_taped(tape, ref_tp, &pair.prompt, &pair.chosen)?;
                let ref_l = score_pair_taped(tape, ref_tp, &pair.prompt, &pair.rejected)?;
                let lp_w = tape.sum(scored_w.token_logprobs);
                let lp_l = tape.sum(scored_l.token_logprobs);
                let rlp_w = tape.sum(ref_w.token_logprobs);
                let rlp_l = tape.sum(ref_l.token_logprobs);
                if spec.block_margin_gradient {
                    let raw = spec.beta
                        * ((tape.value(lp_w).item() - tape.value(rlp_w).item())
                            - (tape.value(lp_l).item() - tape.value(rlp_l).item()));
                    if raw.abs() > MARGIN_CLIP {
                        margin_clips += 1;
                    }
                    tape.scalar(raw.clamp(-MARGIN_CLIP, MARGIN_CLIP))
                } else {
                    let dw = tape.sub(lp_w, rlp_w)?;
                    let dl = tape.sub(lp_l, rlp_l)?;
                    let diff = tape.sub(dw, dl)?;
                    let m = tape.scale(diff, spec.beta);
                    if tape.value(m).item().abs() > MARGIN_CLIP {
                        margin_clips += 1;
                    }
                    tape.clamp(m, -MARGIN_CLIP, MARGIN_CLIP)
                }
            }
        };

        let delta = tape.sub(scored_w.reward, scored_l.reward)?;
        let z = tape.sub(delta, margin_id)?;
        let ls = tape.log_sigmoid(z);
        let pair_loss = tape.neg(ls);
        pair_losses.push(pair_loss);

        let sft_w_node = {
            let mean_lp = tape.mean(scored_w.token_logprobs);
            tape.neg(mean_lp)
        };
        sft_terms.push(sft_w_node);
        let sft_l_value = if sft_target == SftTarget::Both {
            let mean_lp = tape.mean(scored_l.token_logprobs);
            let node = tape.neg(mean_lp);
            sft_terms.push(node);
            tape.value(node).item()
        } else {
            -tape.value(scored_l.token_logprobs).data().iter().sum::<f64>()
                / tape.value(scored_l.token_logprobs).numel() as f64
        };

        sum_rw += tape.value(scored_w.reward).item();
        sum_rl += tape.value(scored_l.reward).item();
        sum_margin += tape.value(margin_id).item();
        sum_bt += tape.value(pair_loss).item();
        sum_sft_w += tape.value(sft_w_node).item();
        sum_sft_l += sft_l_value;
    }

    let losses = tape.concat(0, &pair_losses)?;
    let bt_mean = tape.mean(losses);
    let total = if sft_weight > 0.0 {
        let sfts = tape.concat(0, &sft_terms)?;
        let sft_mean = tape.mean(sfts);
        let weighted = tape.scale(sft_mean, sft_weight);
        tape.add(bt_mean, weighted)?
    } else {
        bt_mean
    };

    let n = batch.len() as f64;
    let report = LossReport {
        reward_chosen: sum_rw / n,
        reward_rejected: sum_rl / n,
        margin: sum_margin / n,
        bt_loss: sum_bt / n,
        sft_loss_chosen: sum_sft_w / n,
        sft_loss_rejected: sum_sft_l / n,
        total: tape.value(total).item(),
    };
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite total loss {}", report.total)));
    }
    Ok(AamLoss { total, report, margin_clips })
}

/// Evaluate the full loss without gradients.
pub fn aam_loss(
    model: &ModelParams,
    reference: Option<&ReferenceSnapshot>,
    batch: &[PreferencePair],
    spec: &MarginSpec,
    sft_weight: f64,
    sft_target: SftTarget,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, model, false);
    Ok(aam_loss_taped(&mut tape, &tp, reference, batch, spec, sft_weight, sft_target)?.report)
}
