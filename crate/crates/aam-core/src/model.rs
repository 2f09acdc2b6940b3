//! Tiny causal transformer with a shared backbone and two heads.
//!
//! The LM head gives per-token log-probabilities (the policy and, via a
//! frozen snapshot, the reference policy); the value head reads the final
//! response position's hidden state and produces the scalar reward. Both
//! heads share every backbone parameter.
//!
//! Tokenization is byte-level: ids 0..=255 are raw bytes, followed by
//! pad/bos/eos specials. Only scoring is implemented — no sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Id, Tape};
use crate::tensor::{bits_hash, Tensor};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;

/// Default vocabulary: 256 byte values plus pad/bos/eos.
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Response,
}

/// A token sequence with its role in a preference pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub role: Role,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, role: Role) -> Self {
        TokenSeq { ids, role }
    }

    pub fn from_bytes(bytes: &[u8], role: Role) -> Self {
        TokenSeq { ids: bytes.iter().map(|&b| b as u32).collect(), role }
    }

    /// Bytes of the sequence; specials are dropped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: BYTE_VOCAB,
            context_len: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Contract(format!(
                "vocab_size {} < 3 (specials required)",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 || self.n_layers == 0 {
            return Err(Error::Contract("context_len >= 2 and n_layers >= 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// All weights of the model. Construct with [`ModelParams::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub lm_w: Tensor,
    pub lm_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Seeded scaled-normal init. The value head starts at zero so every
    /// reward is exactly 0 and the BT loss starts at ln 2.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let tok_emb = Tensor::randn(vec![v, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(vec![cfg.context_len, d], INIT_STD, &mut rng);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(vec![d]),
                wq: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                bq: Tensor::zeros(vec![d]),
                wk: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                bk: Tensor::zeros(vec![d]),
                wv: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                bv: Tensor::zeros(vec![d]),
                wo: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                bo: Tensor::zeros(vec![d]),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(vec![d]),
                w_ff1: Tensor::randn(vec![d, 4 * d], INIT_STD, &mut rng),
                b_ff1: Tensor::zeros(vec![4 * d]),
                w_ff2: Tensor::randn(vec![4 * d, d], INIT_STD, &mut rng),
                b_ff2: Tensor::zeros(vec![d]),
            });
        }
        Ok(ModelParams {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ones(d),
            lnf_b: Tensor::zeros(vec![d]),
            lm_w: Tensor::randn(vec![d, v], INIT_STD, &mut rng),
            lm_b: Tensor::zeros(vec![v]),
            value_w: Tensor::zeros(vec![d, 1]),
            value_b: Tensor::zeros(vec![1]),
        })
    }

    /// Visit every parameter tensor with its name, in a fixed order.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_ff1", &l.w_ff1),
                ("b_ff1", &l.b_ff1),
                ("w_ff2", &l.w_ff2),
                ("b_ff2", &l.b_ff2),
            ] {
                f(format!("layer{i}.{name}"), t);
            }
        }
        f("lnf_g".into(), &self.lnf_g);
        f("lnf_b".into(), &self.lnf_b);
        f("lm_w".into(), &self.lm_w);
        f("lm_b".into(), &self.lm_b);
        f("value_w".into(), &self.value_w);
        f("value_b".into(), &self.value_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{i}");
            for (name, t) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w_ff1", &mut l.w_ff1),
                ("b_ff1", &mut l.b_ff1),
                ("w_ff2", &mut l.w_ff2),
                ("b_ff2", &mut l.b_ff2),
            ] {
                f(&format!("{prefix}.{name}"), t);
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("lm_w", &mut self.lm_w);
        f("lm_b", &mut self.lm_b);
        f("value_w", &mut self.value_w);
        f("value_b", &mut self.value_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    /// All parameters as one flat vector, in `for_each` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        self.for_each_mut(&mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Hash of the exact bit pattern of every parameter.
    pub fn params_hash(&self) -> u64 {
        bits_hash(&self.flatten())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.all_finite());
        ok
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape matches")
}

/// Frozen deep copy of the model, standing in for the reference policy.
/// Never receives gradients; no mutable access is exposed.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    params: ModelParams,
}

impl ReferenceSnapshot {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_hash(&self) -> u64 {
        self.params.params_hash()
    }

    pub fn from_params(params: ModelParams) -> Self {
        ReferenceSnapshot { params }
    }
}

pub fn snapshot_reference(params: &ModelParams) -> ReferenceSnapshot {
    ReferenceSnapshot { params: params.clone() }
}

// ── taped forward pass ──────────────────────────────────────────────

/// Parameter leaves registered on one tape, mirroring [`ModelParams`].
pub struct TapedParams {
    pub cfg: ModelConfig,
    pub leaves: Vec<Id>,
    tok_emb: Id,
    pos_emb: Id,
    layers: Vec<TapedLayer>,
    lnf_g: Id,
    lnf_b: Id,
    lm_w: Id,
    lm_b: Id,
    value_w: Id,
    value_b: Id,
}

struct TapedLayer {
    ln1_g: Id,
    ln1_b: Id,
    wq: Id,
    bq: Id,
    wk: Id,
    bk: Id,
    wv: Id,
    bv: Id,
    wo: Id,
    bo: Id,
    ln2_g: Id,
    ln2_b: Id,
    w_ff1: Id,
    b_ff1: Id,
    w_ff2: Id,
    b_ff2: Id,
}

impl TapedParams {
    /// Register every parameter as a leaf. Leaf order matches
    /// [`ModelParams::for_each`], so leaf gradients line up with
    /// [`ModelParams::flatten`].
    pub fn register(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let mut leaves = Vec::new();
        let mut reg = |tape: &mut Tape, t: &Tensor| {
            let id = tape.leaf(t.clone(), requires_grad);
            leaves.push(id);
            id
        };
        let tok_emb = reg(tape, &params.tok_emb);
        let pos_emb = reg(tape, &params.pos_emb);
        let mut layers = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            layers.push(TapedLayer {
                ln1_g: reg(tape, &l.ln1_g),
                ln1_b: reg(tape, &l.ln1_b),
                wq: reg(tape, &l.wq),
                bq: reg(tape, &l.bq),
                wk: reg(tape, &l.wk),
                bk: reg(tape, &l.bk),
                wv: reg(tape, &l.wv),
                bv: reg(tape, &l.bv),
                wo: reg(tape, &l.wo),
                bo: reg(tape, &l.bo),
                ln2_g: reg(tape, &l.ln2_g),
                ln2_b: reg(tape, &l.ln2_b),
                w_ff1: reg(tape, &l.w_ff1),
                b_ff1: reg(tape, &l.b_ff1),
                w_ff2: reg(tape, &l.w_ff2),
                b_ff2: reg(tape, &l.b_ff2),
            });
        }
        let lnf_g = reg(tape, &params.lnf_g);
        let lnf_b = reg(tape, &params.lnf_b);
        let lm_w = reg(tape, &params.lm_w);
        let lm_b = reg(tape, &params.lm_b);
        let value_w = reg(tape, &params.value_w);
        let value_b = reg(tape, &params.value_b);
        TapedParams {
            cfg: params.cfg,
            leaves,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            lm_w,
            lm_b,
            value_w,
            value_b,
        }
    }

    /// Gradient of the loss w.r.t. every parameter, flat, in
    /// `flatten` order. Zero where a leaf received no gradient.
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for &leaf in &self.leaves {
            match tape.grad(leaf) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(core::iter::repeat(0.0).take(tape.value(leaf).numel())),
            }
        }
        out
    }
}

fn ln_affine(tape: &mut Tape, x: Id, g: Id, b: Id) -> Result<Id> {
    let n = tape.layer_norm(x);
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

fn linear(tape: &mut Tape, x: Id, w: Id, b: Id) -> Result<Id> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Full sequence of token ids scored by the model: BOS, prompt, response.
pub fn scoring_tokens(cfg: &ModelConfig, prompt: &TokenSeq, response: &TokenSeq) -> Result<Vec<usize>> {
    if response.is_empty() {
        return Err(Error::Contract("response must be non-empty".into()));
    }
    let needed = 1 + prompt.len() + response.len();
    if needed > cfg.context_len {
        return Err(Error::Length { needed, context: cfg.context_len });
    }
    let bos = if cfg.vocab_size == BYTE_VOCAB { BOS } else { cfg.vocab_size as u32 - 1 };
    let mut ids = Vec::with_capacity(needed);
    ids.push(bos as usize);
    for &t in prompt.ids.iter().chain(response.ids.iter()) {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Contract(format!(
                "token id {t} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        ids.push(t as usize);
    }
    Ok(ids)
}

/// Backbone forward: token ids -> final hidden states [T, d_model].
pub fn forward_hidden(tape: &mut Tape, tp: &TapedParams, tokens: &[usize]) -> Result<Id> {
    let t_len = tokens.len();
    let cfg = &tp.cfg;
    let dh = cfg.d_model / cfg.n_heads;
    let mut x = {
        let tok = tape.embed(tp.tok_emb, tokens)?;
        let pos = tape.slice(tp.pos_emb, 0, 0, t_len)?;
        tape.add(tok, pos)?
    };

    // causal mask: additive, strictly upper triangle disabled
    let mask = {
        let mut m = vec![0.0; t_len * t_len];
        for r in 0..t_len {
            for c in (r + 1)..t_len {
                m[r * t_len + c] = -1e30;
            }
        }
        tape.constant(Tensor::new(vec![t_len, t_len], m)?)
    };

    for layer in &tp.layers {
        let h = ln_affine(tape, x, layer.ln1_g, layer.ln1_b)?;
        let q = linear(tape, h, layer.wq, layer.bq)?;
        let k = linear(tape, h, layer.wk, layer.bk)?;
        let v = linear(tape, h, layer.wv, layer.bv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice(q, 1, s, e)?;
            let kh = tape.slice(k, 1, s, e)?;
            let vh = tape.slice(v, 1, s, e)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64));
            let scores = tape.add(scores, mask)?;
            let attn = tape.softmax_row(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(1, &heads)?;
        let proj = linear(tape, merged, layer.wo, layer.bo)?;
        x = tape.add(x, proj)?;

        let h2 = ln_affine(tape, x, layer.ln2_g, layer.ln2_b)?;
        let a1 = linear(tape, h2, layer.w_ff1, layer.b_ff1)?;
        let a1 = tape.relu(a1);
        let ff = linear(tape, a1, layer.w_ff2, layer.b_ff2)?;
        x = tape.add(x, ff)?;
    }
    ln_affine(tape, x, tp.lnf_g, tp.lnf_b)
}

/// Raw LM-head logits at every position: [T, vocab].
pub fn forward_logits(tape: &mut Tape, tp: &TapedParams, tokens: &[usize]) -> Result<Id> {
    let hidden = forward_hidden(tape, tp, tokens)?;
    linear(tape, hidden, tp.lm_w, tp.lm_b)
}

/// Log-probabilities over the vocabulary at every position: [T, vocab].
pub fn forward_logprobs(tape: &mut Tape, tp: &TapedParams, tokens: &[usize]) -> Result<Id> {
    let logits = forward_logits(tape, tp, tokens)?;
    Ok(tape.log_softmax_row(logits))
}

/// Per-token log π(y_i | x, y_<i) for each response token: [len(response)].
/// Prompt tokens are conditioned on but not scored.
pub fn token_logprobs_taped(
    tape: &mut Tape,
    tp: &TapedParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Id> {
    let tokens = scoring_tokens(&tp.cfg, prompt, response)?;
    let logprobs = forward_logprobs(tape, tp, &tokens)?;
    let resp_start = 1 + prompt.len(); // absolute index of first response token
    let rows = tape.slice(logprobs, 0, resp_start - 1, resp_start - 1 + response.len())?;
    let targets: Vec<usize> = response.ids.iter().map(|&t| t as usize).collect();
    tape.pick_per_row(rows, &targets)
}

/// Scalar log π(y | x): sum of the per-token log-probabilities.
pub fn sequence_logprob_taped(
    tape: &mut Tape,
    tp: &TapedParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Id> {
    let lp = token_logprobs_taped(tape, tp, prompt, response)?;
    Ok(tape.sum(lp))
}

/// Scalar reward from the value head at the final response position.
pub fn reward_score_taped(
    tape: &mut Tape,
    tp: &TapedParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Id> {
    let tokens = scoring_tokens(&tp.cfg, prompt, response)?;
    let hidden = forward_hidden(tape, tp, &tokens)?;
    let t_len = tokens.len();
    let last = tape.slice(hidden, 0, t_len - 1, t_len)?;
    let r = tape.matmul(last, tp.value_w)?;
    tape.add(r, tp.value_b)
}

/// Reward and per-token log-probabilities from one shared backbone pass.
pub struct ScoredSeq {
    /// Value-head output at the final position, shape [1,1].
    pub reward: Id,
    /// log π(y_i | x, y_<i) for each response token, shape [len(response)].
    pub token_logprobs: Id,
}

/// Score a (prompt, response) pair with both heads, running the backbone
/// once.
pub fn score_pair_taped(
    tape: &mut Tape,
    tp: &TapedParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<ScoredSeq> {
    let tokens = scoring_tokens(&tp.cfg, prompt, response)?;
    let hidden = forward_hidden(tape, tp, &tokens)?;
    let t_len = tokens.len();

    let last = tape.slice(hidden, 0, t_len - 1, t_len)?;
    let r = tape.matmul(last, tp.value_w)?;
    let reward = tape.add(r, tp.value_b)?;

    let logits = linear(tape, hidden, tp.lm_w, tp.lm_b)?;
    let logprobs = tape.log_softmax_row(logits);
    let resp_start = 1 + prompt.len();
    let rows = tape.slice(logprobs, 0, resp_start - 1, resp_start - 1 + response.len())?;
    let targets: Vec<usize> = response.ids.iter().map(|&t| t as usize).collect();
    let token_logprobs = tape.pick_per_row(rows, &targets)?;

    Ok(ScoredSeq { reward, token_logprobs })
}

// ── no-grad convenience wrappers ────────────────────────────────────

pub fn token_logprobs(params: &ModelParams, prompt: &TokenSeq, response: &TokenSeq) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, params, false);
    let lp = token_logprobs_taped(&mut tape, &tp, prompt, response)?;
    Ok(tape.value(lp).data().to_vec())
}

pub fn sequence_logprob(params: &ModelParams, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    Ok(token_logprobs(params, prompt, response)?.iter().sum())
}

pub fn reward_score(params: &ModelParams, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, params, false);
    let r = reward_score_taped(&mut tape, &tp, prompt, response)?;
    Ok(tape.value(r).item())
}
