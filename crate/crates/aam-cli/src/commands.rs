//! The five subcommands. Each one consumes a typed view of the flat
//! config, produces its artifacts under the output directory, and writes
//! a manifest from which the run can be reproduced.

use std::path::{Path, PathBuf};

use aam_core::data::{corpus_fingerprint, generate_corpus, GeneratorConfig, PreferencePair};
use aam_core::losses::{
    margin_bt_loss, sft_loss, ld_margin, pr_margin, MarginMode, MarginSpec, SftTarget, MARGIN_CLIP,
};
use aam_core::eval::{compare_runs, margin_calibration, pairwise_accuracy};
use aam_core::model::{reward_score, snapshot_reference, ModelConfig, ModelParams, TapedParams};
use aam_core::tape::{grad_check, Tape};
use aam_core::trainer::{run_until, total_steps, TrainState, TrainingConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::Reader;
use crate::corpus_io::{load_corpus, save_corpus};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::metrics::{
    render_compare_table, save_compare_rows, save_eval_report, save_metrics,
};

fn contract(msg: String) -> CliError {
    CliError::Core(aam_core::Error::Contract(msg))
}

// ── shared config fragments ─────────────────────────────────────────

fn read_model_config(r: &mut Reader) -> Result<ModelConfig> {
    let defaults = ModelConfig::default();
    Ok(ModelConfig {
        vocab_size: r.usize_or("vocab_size", defaults.vocab_size)?,
        context_len: r.usize_or("context_len", defaults.context_len)?,
        d_model: r.usize_or("d_model", defaults.d_model)?,
        n_layers: r.usize_or("n_layers", defaults.n_layers)?,
        n_heads: r.usize_or("n_heads", defaults.n_heads)?,
        seed: r.u64_or("model_seed", defaults.seed)?,
    })
}

fn read_margin_spec(r: &mut Reader) -> Result<MarginSpec> {
    let defaults = MarginSpec::default();
    let mode = MarginMode::parse(&r.string_or("margin.mode", defaults.mode.as_str())?)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(MarginSpec {
        mode,
        beta: r.f64_or("margin.beta", defaults.beta)?,
        fixed_value: r.f64_or("margin.fixed", defaults.fixed_value)?,
        block_margin_gradient: r.bool_or("margin.block_gradient", defaults.block_margin_gradient)?,
    })
}

fn read_training_config(r: &mut Reader) -> Result<TrainingConfig> {
    let defaults = TrainingConfig::default();
    let margin = read_margin_spec(r)?;
    Ok(TrainingConfig {
        epochs: r.usize_or("epochs", defaults.epochs)?,
        learning_rate: r.f64_or("learning_rate", defaults.learning_rate)?,
        batch_size: r.usize_or("batch_size", defaults.batch_size)?,
        sft_weight: r.f64_or("sft_weight", defaults.sft_weight)?,
        sft_target: SftTarget::parse(&r.string_or("sft_target", defaults.sft_target.as_str())?)
            .map_err(|e| CliError::Config(e.to_string()))?,
        margin,
        beta1: r.f64_or("beta1", defaults.beta1)?,
        beta2: r.f64_or("beta2", defaults.beta2)?,
        eps: r.f64_or("eps", defaults.eps)?,
        grad_clip: r.f64_or("grad_clip", defaults.grad_clip)?,
        seed: r.u64_or("seed", defaults.seed)?,
    })
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn gen_data(mut r: Reader, out: &Path) -> Result<String> {
    let defaults = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        n_pairs: r.usize_or("n_pairs", defaults.n_pairs)?,
        prompt_len: (
            r.usize_or("prompt_len_min", defaults.prompt_len.0)?,
            r.usize_or("prompt_len_max", defaults.prompt_len.1)?,
        ),
        response_len: (
            r.usize_or("response_len_min", defaults.response_len.0)?,
            r.usize_or("response_len_max", defaults.response_len.1)?,
        ),
        reward_seed: r.u64_or("reward_seed", defaults.reward_seed)?,
        ambiguity_frac: r.f64_or("ambiguity_frac", defaults.ambiguity_frac)?,
        flip_prob: r.f64_or("flip_prob", defaults.flip_prob)?,
        gap_threshold: r.f64_or("gap_threshold", defaults.gap_threshold)?,
        seed: r.u64_or("seed", defaults.seed)?,
    };
    let resolved = r.finish()?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let (pairs, corpus_manifest) = generate_corpus(&cfg)?;
    save_corpus(&out.join("corpus.jsonl"), &pairs)?;

    let mut manifest = RunManifest::new("gen-data", resolved);
    manifest.record_output("corpus.jsonl");
    manifest.corpus_fingerprint = Some(format!("{:016x}", corpus_manifest.fingerprint));
    manifest.save(out)?;

    Ok(format!(
        "gen-data: {} pairs ({} ambiguous, {} flipped) fingerprint={:016x}",
        corpus_manifest.n_pairs,
        corpus_manifest.n_ambiguous,
        corpus_manifest.n_flipped,
        corpus_manifest.fingerprint
    ))
}

// ── train ───────────────────────────────────────────────────────────

pub fn train(mut r: Reader, out: &Path) -> Result<String> {
    let corpus_path = r.existing_path("corpus")?;
    let resume_path = r.optional_path("resume")?;
    let stop_after_step = r.usize_or("stop_after_step", 0)?;
    let model_cfg = read_model_config(&mut r)?;
    let train_cfg = read_training_config(&mut r)?;
    let resolved = r.finish()?;

    train_cfg.validate().map_err(config_or_contract)?;
    model_cfg.validate().map_err(config_or_contract)?;

    let corpus = load_corpus(&corpus_path)?;
    let fingerprint = corpus_fingerprint(&corpus);

    let mut state = match &resume_path {
        None => TrainState::init(&train_cfg, model_cfg)?,
        Some(path) => {
            let (state, stored_fp) = load_checkpoint(path)?;
            if state.model.cfg != model_cfg {
                return Err(contract(format!(
                    "resume checkpoint was trained with a different model config ({:?} vs {:?})",
                    state.model.cfg, model_cfg
                )));
            }
            if let Some(fp) = stored_fp {
                if fp != fingerprint {
                    return Err(contract(format!(
                        "resume checkpoint was trained on corpus {fp:016x}, not {fingerprint:016x}"
                    )));
                }
            }
            state
        }
    };

    let target = if stop_after_step == 0 { usize::MAX } else { stop_after_step };
    let start_step = state.step;
    let mut records = Vec::new();
    run_until(&mut state, &train_cfg, &corpus, target, &mut records)?;

    save_checkpoint(&out.join("checkpoint.bin"), &state, Some(fingerprint))?;
    save_metrics(&out.join("metrics.jsonl"), &records)?;

    let mut manifest = RunManifest::new("train", resolved);
    manifest.record_input("corpus", &corpus_path)?;
    if let Some(path) = &resume_path {
        manifest.record_input("resume", path)?;
    }
    manifest.record_output("checkpoint.bin");
    manifest.record_output("metrics.jsonl");
    manifest.corpus_fingerprint = Some(format!("{fingerprint:016x}"));
    manifest.save(out)?;

    let last = records.last().map(|r| r.report.total);
    Ok(format!(
        "train: mode={} steps {}..{} of {} final_total={}",
        train_cfg.margin.mode.as_str(),
        start_step,
        state.step,
        total_steps(&train_cfg, corpus.len()),
        last.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into()),
    ))
}

/// Validation failures of user-supplied values are config errors.
fn config_or_contract(e: aam_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

// ── eval ────────────────────────────────────────────────────────────

pub fn eval(mut r: Reader, out: &Path) -> Result<String> {
    let checkpoint_path = r.existing_path("checkpoint")?;
    let corpus_path = r.existing_path("corpus")?;
    let label = r.string_or("label", "eval")?;
    let spec = read_margin_spec(&mut r)?;
    let resolved = r.finish()?;

    let (state, train_fp) = load_checkpoint(&checkpoint_path)?;
    let corpus = load_corpus(&corpus_path)?;

    let hash_before = state.model.params_hash();
    let mut report = pairwise_accuracy(&state.model, &corpus, &label, train_fp)?;
    if matches!(spec.mode, MarginMode::Pr | MarginMode::Ld) {
        report.margin_gap_spearman =
            Some(margin_calibration(&state.model, state.reference.as_ref(), &corpus, &spec)?);
    }
    debug_assert_eq!(state.model.params_hash(), hash_before);

    save_eval_report(&out.join("eval.json"), &report)?;

    let mut manifest = RunManifest::new("eval", resolved);
    manifest.record_input("checkpoint", &checkpoint_path)?;
    manifest.record_input("corpus", &corpus_path)?;
    manifest.record_output("eval.json");
    manifest.corpus_fingerprint = Some(format!("{:016x}", report.corpus_fingerprint));
    manifest.save(out)?;

    Ok(format!(
        "eval: label={} accuracy={:.4} n_pairs={} spearman={}",
        report.label,
        report.pairwise_accuracy,
        report.n_pairs,
        report
            .margin_gap_spearman
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
    ))
}

// ── gradcheck ───────────────────────────────────────────────────────

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Loss at the given flat parameters with the margins held at `frozen`
/// when the margin gradient is blocked; the finite-difference oracle
/// for the blocked policy must not see the margin move.
fn gradcheck_loss(
    template: &ModelParams,
    flat: &[f64],
    batch: &[PreferencePair],
    spec: &MarginSpec,
    reference: Option<&aam_core::model::ReferenceSnapshot>,
    frozen: Option<&[f64]>,
    sft_weight: f64,
) -> aam_core::Result<f64> {
    let mut model = template.clone();
    model.set_from_flat(flat)?;
    let mut triples = Vec::with_capacity(batch.len());
    let mut sft_sum = 0.0;
    for (i, pair) in batch.iter().enumerate() {
        let r_w = reward_score(&model, &pair.prompt, &pair.chosen)?;
        let r_l = reward_score(&model, &pair.prompt, &pair.rejected)?;
        let raw = match (frozen, spec.mode) {
            (Some(values), _) => values[i],
            (None, MarginMode::None) => 0.0,
            (None, MarginMode::Fixed) => spec.fixed_value,
            (None, MarginMode::Pr) => pr_margin(&model, reference.unwrap(), pair, spec)?,
            (None, MarginMode::Ld) => ld_margin(&model, pair, spec)?,
        };
        triples.push((r_w, r_l, raw.clamp(-MARGIN_CLIP, MARGIN_CLIP)));
        sft_sum += sft_loss(&model, &pair.prompt, &pair.chosen)?;
    }
    Ok(margin_bt_loss(&triples)? + sft_weight * sft_sum / batch.len() as f64)
}

pub fn gradcheck(mut r: Reader, out: &Path) -> Result<String> {
    let spec = read_margin_spec(&mut r)?;
    let seed = r.u64_or("seed", 0)?;
    let n_pairs = r.usize_or("n_pairs", 2)?;
    let samples = r.usize_or("samples", 100)?;
    let sft_weight = r.f64_or("sft_weight", 0.01)?;
    // gradcheck always runs on a small model; only the seed varies
    let model_cfg = ModelConfig {
        vocab_size: 259,
        context_len: 64,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        seed,
    };
    let resolved = r.finish()?;

    let gen = GeneratorConfig { n_pairs, seed, ..GeneratorConfig::default() };
    let (batch, _) = generate_corpus(&gen)?;
    let model = ModelParams::init(model_cfg)?;
    // a differently seeded twin keeps the PR margin nonzero under the check
    let ref_snapshot =
        snapshot_reference(&ModelParams::init(ModelConfig { seed: seed + 1, ..model_cfg })?);
    let reference = (spec.mode == MarginMode::Pr).then_some(&ref_snapshot);

    let flat = model.flatten();
    let frozen: Option<Vec<f64>> = if spec.block_margin_gradient {
        let mut values = Vec::with_capacity(batch.len());
        for pair in &batch {
            values.push(match spec.mode {
                MarginMode::None => 0.0,
                MarginMode::Fixed => spec.fixed_value,
                MarginMode::Pr => pr_margin(&model, reference.unwrap(), pair, &spec)?,
                MarginMode::Ld => ld_margin(&model, pair, &spec)?,
            });
        }
        Some(values)
    } else {
        None
    };

    // analytic gradient through the tape
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, &model, true);
    let taped = aam_core::losses::aam_loss_taped(
        &mut tape,
        &tp,
        reference,
        &batch,
        &spec,
        sft_weight,
        SftTarget::Chosen,
    )?;
    tape.backward(taped.total)?;
    let analytic = tp.flat_grad(&tape);

    let indices: Vec<usize> = (0..samples).map(|i| i * flat.len() / samples).collect();
    let max_rel_error = grad_check(
        |p| gradcheck_loss(&model, p, &batch, &spec, reference, frozen.as_deref(), sft_weight),
        &flat,
        &analytic,
        1e-5,
        &indices,
    )?;
    let passed = max_rel_error < GRADCHECK_TOLERANCE;

    let record = serde_json::json!({
        "mode": spec.mode.as_str(),
        "block_margin_gradient": spec.block_margin_gradient,
        "samples": indices.len(),
        "max_rel_error": max_rel_error,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
    });
    std::fs::write(out.join("gradcheck.json"), record.to_string() + "\n")?;

    let mut manifest = RunManifest::new("gradcheck", resolved);
    manifest.record_output("gradcheck.json");
    manifest.save(out)?;

    if !passed {
        return Err(CliError::Core(aam_core::Error::Numeric(format!(
            "gradcheck mode={} max_rel_error={max_rel_error:e} exceeds {GRADCHECK_TOLERANCE:e}",
            spec.mode.as_str()
        ))));
    }
    Ok(format!(
        "gradcheck: mode={} block={} samples={} max_rel_error={max_rel_error:.3e} passed",
        spec.mode.as_str(),
        spec.block_margin_gradient,
        indices.len(),
    ))
}

// ── compare ─────────────────────────────────────────────────────────

pub fn compare(mut r: Reader, out: &Path) -> Result<String> {
    let raw = r.string_or("reports", "")?;
    let resolved = r.finish()?;
    if raw.is_empty() {
        return Err(CliError::Config("key `reports` needs a comma-separated list of eval reports".into()));
    }
    let paths: Vec<PathBuf> = raw.split(',').map(|s| PathBuf::from(s.trim())).collect();
    let mut reports = Vec::with_capacity(paths.len());
    for path in &paths {
        if !path.is_file() {
            return Err(CliError::Config(format!("report `{}` does not exist", path.display())));
        }
        reports.push(crate::metrics::load_eval_report(path)?);
    }

    let table = compare_runs(&reports)?;
    let rendered = render_compare_table(&table);
    std::fs::write(out.join("compare.txt"), &rendered)?;
    save_compare_rows(&out.join("compare.jsonl"), &table)?;

    let mut manifest = RunManifest::new("compare", resolved);
    for (i, path) in paths.iter().enumerate() {
        manifest.record_input(&format!("reports[{i}]"), path)?;
    }
    manifest.record_output("compare.txt");
    manifest.record_output("compare.jsonl");
    manifest.corpus_fingerprint = Some(format!("{:016x}", table.corpus_fingerprint));
    manifest.save(out)?;

    Ok(rendered)
}
