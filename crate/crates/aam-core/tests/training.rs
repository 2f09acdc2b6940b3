//! Optimizer and training-loop behavior: closed-form Adam single-step
//! oracles, clipping, failure modes, determinism, and checkpoint-resume
//! equivalence.

use aam_core::data::{generate_corpus, GeneratorConfig, PreferencePair};
use aam_core::losses::{MarginMode, MarginSpec};
use aam_core::model::ModelConfig;
use aam_core::trainer::{
    adam_step, clip_grad_norm, run_until, total_steps, train, TrainState, TrainingConfig,
};

fn tiny_model_cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 259,
        context_len: 64,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        seed,
    }
}

fn small_corpus(n: usize, seed: u64) -> Vec<PreferencePair> {
    let cfg = GeneratorConfig { n_pairs: n, seed, ..GeneratorConfig::default() };
    generate_corpus(&cfg).unwrap().0
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let cfg = TrainingConfig { learning_rate: 0.0, ..TrainingConfig::default() };
    let mut state = TrainState::init(&TrainingConfig::default(), tiny_model_cfg(1)).unwrap();
    let before = state.model.params_hash();
    let grad = vec![0.25; state.model.num_params()];
    adam_step(&mut state, &grad, &cfg).unwrap();
    assert_eq!(state.step, 1);
    assert_eq!(state.model.params_hash(), before, "lr = 0 must leave parameters bit-identical");
    // the full loop rejects a zero learning rate up front
    assert!(cfg.validate().is_err());
}

#[test]
fn first_adam_step_moves_each_parameter_by_about_the_learning_rate() {
    // with bias correction, step 1 gives m_hat = g and v_hat = g^2, so the
    // update is lr * g / (|g| + eps) = lr * sign(g) up to eps
    let cfg = TrainingConfig::default();
    let mut state = TrainState::init(&cfg, tiny_model_cfg(2)).unwrap();
    let before = state.model.flatten();
    let n = state.model.num_params();
    let grad: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.7 } else { -0.3 }).collect();
    adam_step(&mut state, &grad, &cfg).unwrap();
    let after = state.model.flatten();
    for i in 0..n {
        let delta = after[i] - before[i];
        let expected = -cfg.learning_rate * grad[i].signum();
        assert!(
            (delta - expected).abs() < 1e-9,
            "param {i}: delta {delta} vs {expected}"
        );
    }
}

#[test]
fn gradient_clipping_rescales_to_the_bound() {
    // a 3-4-0 vector has norm 5; clipping to 2.5 halves it
    let mut g = vec![3.0, 4.0, 0.0];
    let norm = clip_grad_norm(&mut g, 2.5);
    assert_eq!(norm, 5.0);
    assert_eq!(g, vec![1.5, 2.0, 0.0]);
    // within the bound: untouched
    let mut h = vec![0.3, 0.4];
    assert_eq!(clip_grad_norm(&mut h, 1.0), 0.5);
    assert_eq!(h, vec![0.3, 0.4]);
    // 0 disables clipping
    let mut k = vec![30.0, 40.0];
    assert_eq!(clip_grad_norm(&mut k, 0.0), 50.0);
    assert_eq!(k, vec![30.0, 40.0]);
}

#[test]
fn zero_gradient_decays_the_moments_but_not_the_parameters() {
    let cfg = TrainingConfig::default();
    let mut state = TrainState::init(&cfg, tiny_model_cfg(3)).unwrap();
    let n = state.model.num_params();
    adam_step(&mut state, &vec![1.0; n], &cfg).unwrap();
    let m1 = state.m[0];
    adam_step(&mut state, &vec![0.0; n], &cfg).unwrap();
    assert!((state.m[0] - cfg.beta1 * m1).abs() < 1e-15);
}

#[test]
fn non_finite_gradients_abort() {
    let cfg = TrainingConfig::default();
    let mut state = TrainState::init(&cfg, tiny_model_cfg(4)).unwrap();
    let mut grad = vec![0.0; state.model.num_params()];
    grad[7] = f64::NAN;
    let err = adam_step(&mut state, &grad, &cfg).unwrap_err();
    assert!(matches!(err, aam_core::Error::Numeric(_)));
    assert_eq!(state.step, 0, "a failed step must not advance the counter");
}

#[test]
fn pr_margin_run_matches_plain_bt_on_the_first_step() {
    // at initialization the reference equals the live model, so the PR
    // margin is exactly zero and the first update must coincide
    let corpus = small_corpus(16, 5);
    let base = TrainingConfig { batch_size: 8, seed: 9, ..TrainingConfig::default() };
    let pr = TrainingConfig { margin: MarginSpec::pr(0.5), ..base };

    let mut s_base = TrainState::init(&base, tiny_model_cfg(6)).unwrap();
    let mut s_pr = TrainState::init(&pr, tiny_model_cfg(6)).unwrap();
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    run_until(&mut s_base, &base, &corpus, 1, &mut r1).unwrap();
    run_until(&mut s_pr, &pr, &corpus, 1, &mut r2).unwrap();

    assert_eq!(s_base.model.params_hash(), s_pr.model.params_hash());
    assert!(r2[0].report.margin.abs() < 1e-12);
    assert_eq!(r1[0].mode, MarginMode::None.as_str());
    assert_eq!(r2[0].mode, MarginMode::Pr.as_str());
}

#[test]
fn short_run_beats_the_chance_loss_on_a_separable_corpus() {
    let corpus = small_corpus(64, 42);
    let cfg = TrainingConfig {
        epochs: 7,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 42,
        ..TrainingConfig::default()
    };
    assert_eq!(total_steps(&cfg, corpus.len()), 56);
    let (_, records) = train(&cfg, tiny_model_cfg(42), &corpus).unwrap();
    let first = records.first().unwrap().report.bt_loss;
    let last = records.last().unwrap().report.bt_loss;
    assert!((first - core::f64::consts::LN_2).abs() < 1e-9, "loss starts at ln 2, got {first}");
    assert!(last < core::f64::consts::LN_2 - 0.05, "final loss {last} should beat chance");
}

#[test]
fn identical_configs_reproduce_bit_identical_runs() {
    let corpus = small_corpus(24, 7);
    let cfg = TrainingConfig { epochs: 2, batch_size: 8, seed: 11, ..TrainingConfig::default() };
    let (s1, r1) = train(&cfg, tiny_model_cfg(8), &corpus).unwrap();
    let (s2, r2) = train(&cfg, tiny_model_cfg(8), &corpus).unwrap();
    assert_eq!(s1.model.params_hash(), s2.model.params_hash());
    assert_eq!(r1, r2);
    // and a different seed diverges
    let cfg_b = TrainingConfig { seed: 12, ..cfg };
    let (s3, _) = train(&cfg_b, tiny_model_cfg(8), &corpus).unwrap();
    assert_ne!(s1.model.params_hash(), s3.model.params_hash());
}

#[test]
fn resumed_run_replays_the_uninterrupted_run_exactly() {
    let corpus = small_corpus(24, 13);
    let cfg = TrainingConfig {
        epochs: 4,
        batch_size: 8,
        seed: 21,
        margin: MarginSpec::ld(0.2),
        ..TrainingConfig::default()
    };
    let total = total_steps(&cfg, corpus.len());
    assert_eq!(total, 12);

    // uninterrupted
    let (straight, rec_straight) = train(&cfg, tiny_model_cfg(14), &corpus).unwrap();

    // interrupted mid-epoch at step 5, then resumed from a deep copy of
    // the state (what a checkpoint round-trip preserves)
    let mut state = TrainState::init(&cfg, tiny_model_cfg(14)).unwrap();
    let mut records = Vec::new();
    run_until(&mut state, &cfg, &corpus, 5, &mut records).unwrap();
    let mut resumed = state.clone();
    run_until(&mut resumed, &cfg, &corpus, total, &mut records).unwrap();

    assert_eq!(resumed.step, straight.step);
    assert_eq!(resumed.model.params_hash(), straight.model.params_hash());
    assert_eq!(records, rec_straight);
    let bits = |v: &[f64]| aam_core::tensor::bits_hash(v);
    assert_eq!(bits(&resumed.m), bits(&straight.m));
    assert_eq!(bits(&resumed.v), bits(&straight.v));
}
