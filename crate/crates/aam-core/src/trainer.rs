//! Adam training of the reward model under any margin mode.
//!
//! Runs are a pure function of (seed, config, corpus): batch order per
//! epoch is derived from the seed and epoch index alone, so a checkpointed
//! and resumed run replays the uninterrupted run step for step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::losses::{aam_loss_taped, LossReport, MarginMode, MarginSpec, SftTarget};
use crate::model::{snapshot_reference, ModelConfig, ModelParams, ReferenceSnapshot, TapedParams};
use crate::rng::Rng;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sft_weight: f64,
    pub sft_target: SftTarget,
    pub margin: MarginSpec,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 2,
            // large enough to train the tiny default model in a
            // useful number of steps.
            learning_rate: 3e-4,
            batch_size: 16,
            sft_weight: 0.01,
            sft_target: SftTarget::Chosen,
            margin: MarginSpec::none(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract("epochs and batch_size must be >= 1".into()));
        }
        if self.sft_weight < 0.0 {
            return Err(Error::Contract(format!("sft_weight {} must be >= 0", self.sft_weight)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Contract("adam betas must lie in [0,1)".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Contract("grad_clip must be >= 0".into()));
        }
        self.margin.validate()
    }
}

/// Optimizer state: step counter, live parameters, Adam moments, and the
/// frozen reference snapshot (PR mode only).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub model: ModelParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub reference: Option<ReferenceSnapshot>,
}

impl TrainState {
    /// Fresh state: seeded init, zero moments, reference snapshot taken
    /// now when the margin mode needs one.
    pub fn init(cfg: &TrainingConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelParams::init(model_cfg)?;
        let n = model.num_params();
        let reference = match cfg.margin.mode {
            MarginMode::Pr => Some(snapshot_reference(&model)),
            _ => None,
        };
        Ok(TrainState { step: 0, model, m: vec![0.0; n], v: vec![0.0; n], reference })
    }
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mode: String,
    pub report: LossReport,
    pub grad_norm: f64,
    pub margin_clips: usize,
}

/// Clip the gradient to `max_norm` (global L2), returning the pre-clip
/// norm. `max_norm == 0` disables clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Standard Adam with bias correction. Increments the step counter.
pub fn adam_step(state: &mut TrainState, grad: &[f64], cfg: &TrainingConfig) -> Result<()> {
    if grad.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "gradient length {} != parameter count {}",
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("NaN gradient at step {}", state.step)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let mut flat = state.model.flatten();
    for i in 0..flat.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        flat[i] -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
    state.model.set_from_flat(&flat)
}

pub fn steps_per_epoch(n_pairs: usize, batch_size: usize) -> usize {
    n_pairs.div_ceil(batch_size)
}

pub fn total_steps(cfg: &TrainingConfig, n_pairs: usize) -> usize {
    cfg.epochs * steps_per_epoch(n_pairs, cfg.batch_size)
}

/// Batch order for one epoch: a pure function of (seed, epoch), so resume
/// does not depend on any live RNG state.
fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x5851f42d4c957f2d));
    rng.permutation(n)
}

/// Advance the state until `target_step` (capped at the run's total),
/// appending one record per step.
pub fn run_until(
    state: &mut TrainState,
    cfg: &TrainingConfig,
    corpus: &[PreferencePair],
    target_step: usize,
    records: &mut Vec<StepRecord>,
) -> Result<()> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if cfg.margin.mode == MarginMode::Pr && state.reference.is_none() {
        return Err(Error::Contract("PR margin requires a reference snapshot in the state".into()));
    }
    let spe = steps_per_epoch(corpus.len(), cfg.batch_size);
    let end = target_step.min(total_steps(cfg, corpus.len()));

    while state.step < end {
        let epoch = state.step / spe;
        let batch_idx = state.step % spe;
        let perm = epoch_permutation(cfg.seed, epoch, corpus.len());
        let lo = batch_idx * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(corpus.len());
        let batch: Vec<PreferencePair> = perm[lo..hi].iter().map(|&i| corpus[i].clone()).collect();

        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, &state.model, true);
        let out = aam_loss_taped(&mut tape, &tp, state.reference.as_ref(), &batch, &cfg.margin, cfg.sft_weight, cfg.sft_target)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", state.step)),
                other => other,
            })?;
        tape.backward(out.total)?;
        let mut grad = tp.flat_grad(&tape);
        let grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip);
        let step_before = state.step;
        adam_step(state, &grad, cfg)?;

        records.push(StepRecord {
            step: step_before,
            mode: cfg.margin.mode.as_str().into(),
            report: out.report,
            grad_norm,
            margin_clips: out.margin_clips,
        });
    }
    Ok(())
}

/// Full run from a fresh state: `epochs * ceil(n / batch_size)` Adam steps.
pub fn train(
    cfg: &TrainingConfig,
    model_cfg: ModelConfig,
    corpus: &[PreferencePair],
) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut state = TrainState::init(cfg, model_cfg)?;
    let mut records = Vec::new();
    run_until(&mut state, cfg, corpus, usize::MAX, &mut records)?;
    Ok((state, records))
}
