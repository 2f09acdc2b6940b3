//! Synthetic preference corpora with a planted ground-truth reward.
//!
//! Responses are byte strings over a small alphabet with per-prompt Markov
//! structure, so the tiny model has something to learn. Each pair is
//! labeled by the planted reward; a configurable fraction of pairs is
//! drawn from the low-gap (ambiguous) regime, and labels are flipped with
//! probability `flip_prob` on ambiguous pairs only. Generation is a pure
//! function of [`GeneratorConfig`].

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Role, TokenSeq};
use crate::rng::Rng;

/// Ground-truth annotations carried alongside a generated pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeta {
    /// Planted reward gap before any label flip; always >= 0.
    pub true_gap: f64,
    /// True when the label was flipped against the planted reward.
    pub flipped: bool,
    /// True when the pair was drawn from the low-gap regime.
    pub ambiguous: bool,
}

/// A prompt with a chosen and a rejected response.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub meta: Option<PairMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub n_pairs: usize,
    pub prompt_len: (usize, usize),
    pub response_len: (usize, usize),
    /// Seed of the planted reward's feature map.
    pub reward_seed: u64,
    /// Fraction of pairs drawn from the ambiguous (gap < tau) regime.
    pub ambiguity_frac: f64,
    /// Label-flip probability, applied to ambiguous pairs only.
    pub flip_prob: f64,
    /// Gap threshold separating ambiguous from clear pairs.
    pub gap_threshold: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_pairs: 1000,
            prompt_len: (4, 10),
            response_len: (6, 16),
            reward_seed: 1,
            ambiguity_frac: 0.0,
            flip_prob: 0.0,
            gap_threshold: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Contract("n_pairs must be positive".into()));
        }
        let (pl, pu) = self.prompt_len;
        let (rl, ru) = self.response_len;
        if pl == 0 || pl > pu || rl == 0 || rl > ru {
            return Err(Error::Contract(format!(
                "invalid length ranges: prompt {pl}..={pu}, response {rl}..={ru}"
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_frac) {
            return Err(Error::Contract(format!("ambiguity_frac {} outside [0,1]", self.ambiguity_frac)));
        }
        if !(0.0..=0.5).contains(&self.flip_prob) {
            return Err(Error::Contract(format!("flip_prob {} outside [0,0.5]", self.flip_prob)));
        }
        if self.gap_threshold <= 0.0 {
            return Err(Error::Contract(format!("gap_threshold {} must be positive", self.gap_threshold)));
        }
        Ok(())
    }
}

// ── planted reward ──────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Pseudorandom weight in [-1, 1] keyed by (seed, tag, key).
fn feature_weight(seed: u64, tag: u64, key: u64) -> f64 {
    let h = splitmix64(seed ^ (tag << 56) ^ key.wrapping_mul(0x9e3779b97f4a7c15));
    (h >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0
}

/// Deterministic scalar score from a fixed random feature map over byte
/// n-grams of (prompt, response): response unigrams, response bigrams, and
/// prompt-conditioned unigrams.
pub fn planted_reward(seed: u64, prompt: &TokenSeq, response: &TokenSeq) -> f64 {
    let resp = response.to_bytes();
    if resp.is_empty() {
        return 0.0;
    }
    let prompt_bytes = prompt.to_bytes();
    let p0 = prompt_bytes.first().copied().unwrap_or(0) as u64;

    let mut uni = 0.0;
    let mut cross = 0.0;
    for &b in &resp {
        uni += feature_weight(seed, 1, b as u64);
        cross += feature_weight(seed, 3, (p0 << 8) | b as u64);
    }
    uni /= resp.len() as f64;
    cross /= resp.len() as f64;

    let mut bi = 0.0;
    if resp.len() > 1 {
        for w in resp.windows(2) {
            bi += feature_weight(seed, 2, ((w[0] as u64) << 8) | w[1] as u64);
        }
        bi /= (resp.len() - 1) as f64;
    }

    uni + 0.5 * bi + 0.25 * cross
}

// ── sequence sampling ───────────────────────────────────────────────

/// Response alphabet: 64 printable bytes. Small alphabet keeps the
/// planted-reward task learnable by a tiny model.
pub const ALPHABET: core::ops::Range<u8> = 33..97;

fn alphabet_byte(i: usize) -> u8 {
    ALPHABET.start + (i % 64) as u8
}

fn sample_prompt(rng: &mut Rng, cfg: &GeneratorConfig) -> TokenSeq {
    let len = cfg.prompt_len.0 + rng.below(cfg.prompt_len.1 - cfg.prompt_len.0 + 1);
    let bytes: Vec<u8> = (0..len).map(|_| alphabet_byte(rng.below(64))).collect();
    TokenSeq::from_bytes(&bytes, Role::Prompt)
}

/// Markov-biased response: each byte follows the previous one through a
/// per-prompt preferred-successor table with probability 0.7, otherwise
/// uniform over the alphabet.
fn sample_response(rng: &mut Rng, cfg: &GeneratorConfig, prompt: &TokenSeq) -> TokenSeq {
    let mut style = cfg.seed;
    for &b in &prompt.to_bytes() {
        style = splitmix64(style ^ b as u64);
    }
    let len = cfg.response_len.0 + rng.below(cfg.response_len.1 - cfg.response_len.0 + 1);
    let mut bytes = Vec::with_capacity(len);
    let mut prev = alphabet_byte(rng.below(64));
    bytes.push(prev);
    for _ in 1..len {
        let next = if rng.uniform() < 0.7 {
            alphabet_byte(splitmix64(style ^ prev as u64) as usize)
        } else {
            alphabet_byte(rng.below(64))
        };
        bytes.push(next);
        prev = next;
    }
    TokenSeq::from_bytes(&bytes, Role::Response)
}

// ── corpus generation ───────────────────────────────────────────────

/// Generator config plus a checksum of the produced corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub config: GeneratorConfig,
    pub n_pairs: usize,
    pub n_ambiguous: usize,
    pub n_flipped: usize,
    pub fingerprint: u64,
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<(Vec<PreferencePair>, CorpusManifest)> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let n_ambiguous_target = libm::round(cfg.ambiguity_frac * cfg.n_pairs as f64) as usize;
    let n_clear_target = cfg.n_pairs - n_ambiguous_target;

    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut n_amb = 0;
    let mut n_clear = 0;
    let mut n_flipped = 0;
    let max_attempts = 500 * cfg.n_pairs;
    let mut attempts = 0;

    while pairs.len() < cfg.n_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation(format!(
                "could not draw {} ambiguous / {} clear pairs within {} attempts (gap_threshold {})",
                n_ambiguous_target, n_clear_target, max_attempts, cfg.gap_threshold
            )));
        }
        let prompt = sample_prompt(&mut rng, cfg);
        let a = sample_response(&mut rng, cfg, &prompt);
        let b = sample_response(&mut rng, cfg, &prompt);
        if a == b {
            continue;
        }
        let ra = planted_reward(cfg.reward_seed, &prompt, &a);
        let rb = planted_reward(cfg.reward_seed, &prompt, &b);
        let gap = libm::fabs(ra - rb);
        let ambiguous = gap < cfg.gap_threshold;
        if ambiguous {
            if n_amb >= n_ambiguous_target {
                continue;
            }
            n_amb += 1;
        } else {
            if n_clear >= n_clear_target {
                continue;
            }
            n_clear += 1;
        }
        let (mut chosen, mut rejected) = if ra >= rb { (a, b) } else { (b, a) };
        let mut flipped = false;
        if ambiguous && rng.uniform() < cfg.flip_prob {
            core::mem::swap(&mut chosen, &mut rejected);
            flipped = true;
            n_flipped += 1;
        }
        pairs.push(PreferencePair {
            prompt,
            chosen,
            rejected,
            meta: Some(PairMeta { true_gap: gap, flipped, ambiguous }),
        });
    }
    rng.shuffle(&mut pairs);

    let manifest = CorpusManifest {
        config: *cfg,
        n_pairs: pairs.len(),
        n_ambiguous: n_amb,
        n_flipped,
        fingerprint: corpus_fingerprint(&pairs),
    };
    Ok((pairs, manifest))
}

/// Order-sensitive checksum over the token content of every pair.
pub fn corpus_fingerprint(pairs: &[PreferencePair]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let eat = |h: &mut u64, bytes: &[u8]| {
        for &b in bytes {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x100000001b3);
        }
    };
    for p in pairs {
        for seq in [&p.prompt, &p.chosen, &p.rejected] {
            for &id in &seq.ids {
                eat(&mut h, &id.to_le_bytes());
            }
            eat(&mut h, &[0xff]);
        }
        h = h.wrapping_mul(0x100000001b3) ^ 0x1d;
    }
    h
}
