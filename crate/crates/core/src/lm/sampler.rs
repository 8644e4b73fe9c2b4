use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::text::TokenId;

/// Sampling settings. A temperature of exactly zero selects greedy decoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Maximum number of sampled tokens, end-of-sequence included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_len: 6,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be finite and non-negative"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

/// One sampled response.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Sampled ids, ending with end-of-sequence when `terminated`.
    pub ids: Vec<TokenId>,
    /// Log-probabilities of `ids` under the untempered model.
    pub logprobs: Vec<f64>,
    pub terminated: bool,
}

impl Sample {
    /// Ids without the trailing end-of-sequence symbol.
    pub fn text_ids(&self) -> &[TokenId] {
        if self.terminated {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

/// Samples until end-of-sequence or `cfg.max_len` tokens.
///
/// Returned log-probabilities are those of the model itself, not of the
/// temperature-scaled sampling distribution.
pub fn sample_response<R: Rng + ?Sized>(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Sample {
    let eos = model.eos();
    let mut context = prompt.to_vec();
    let mut ids = Vec::new();
    let mut logprobs = Vec::new();
    let mut terminated = false;
    for _ in 0..cfg.max_len {
        let logp = model.log_distribution(&context);
        let next = if cfg.is_greedy() {
            argmax(&logp)
        } else {
            draw(&logp, cfg.temperature, rng)
        };
        ids.push(next);
        logprobs.push(logp[next]);
        if Some(next) == eos {
            terminated = true;
            break;
        }
        context.push(next);
    }
    Sample {
        ids,
        logprobs,
        terminated,
    }
}

/// Draws `n` complete strings from `model` with an empty prompt, skipping
/// samples that hit `max_len` before end-of-sequence.
///
/// Fails if fewer than one in a hundred attempts terminates.
pub fn sample_corpus<R: Rng + ?Sized>(
    model: &dyn LanguageModel,
    n: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    let cfg = SamplerConfig { temperature: 1.0, max_len, seed: 0 };
    cfg.validate()?;
    let tok = model.tokenizer();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n.max(1) {
            return Err(Error::domain(format!(
                "only {} of {n} samples terminated within {max_len} tokens",
                out.len()
            )));
        }
        let s = sample_response(model, &[], &cfg, rng);
        if s.terminated {
            out.push(tok.decode(s.text_ids())?);
        }
    }
    Ok(out)
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(logp: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
