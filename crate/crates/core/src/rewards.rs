//! Cross-model entropy rewards from a frozen verifier.
//!
//! The verifier scores a response under its own tokenization, conditioned on
//! its own tokenization of the raw prompt. In token mode the per-token
//! log-probabilities are then redistributed onto generator positions by
//! character overlap; in sequence mode they are averaged into one scalar.
//! A response that ended with end-of-sequence has one extra generator
//! position carrying the verifier's end-of-sequence log-probability.

use serde::{Deserialize, Serialize};

use crate::align::align;
use crate::error::{Error, Result};
use crate::lm::{token_logprobs, LanguageModel};
use crate::text::{TokenId, TokenizedText, Tokenizer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    #[default]
    Token,
    Sequence,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(RewardMode::Token),
            "sequence" => Ok(RewardMode::Sequence),
            other => Err(Error::config(format!("unknown reward mode {other:?}"))),
        }
    }
}

/// A response string and whether generation stopped on end-of-sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub text: String,
    pub terminated: bool,
}

impl Response {
    /// A response cut off without an end-of-sequence token.
    pub fn open(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            terminated: false,
        }
    }

    pub fn terminated(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            terminated: true,
        }
    }
}

/// Rewards of one response at generator positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RowRewards {
    /// `-CME` per generator position; zero where masked.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Verifier log-likelihood of the whole response.
    pub total: f64,
}

/// `G × T_max` rewards with validity mask. Rows shorter than `T_max` are
/// padded with masked zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMatrix {
    mode: RewardMode,
    cols: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    lengths: Vec<usize>,
    totals: Vec<f64>,
    /// Per-response scalar reward in sequence mode.
    scalars: Option<Vec<f64>>,
}

impl RewardMatrix {
    pub fn from_rows(rows: Vec<RowRewards>) -> Self {
        let cols = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
        let mut values = vec![0.0; rows.len() * cols];
        let mut mask = vec![false; rows.len() * cols];
        for (i, r) in rows.iter().enumerate() {
            for (t, (&v, &m)) in r.values.iter().zip(&r.mask).enumerate() {
                values[i * cols + t] = if m { v } else { 0.0 };
                mask[i * cols + t] = m;
            }
        }
        Self {
            mode: RewardMode::Token,
            cols,
            values,
            mask,
            lengths: rows.iter().map(|r| r.values.len()).collect(),
            totals: rows.iter().map(|r| r.total).collect(),
            scalars: None,
        }
    }

    /// Sequence-mode matrix: each row's scalar broadcast over its positions.
    pub fn from_scalars(scalars: Vec<f64>, lengths: &[usize]) -> Result<Self> {
        if scalars.len() != lengths.len() {
            return Err(Error::domain("scalar rewards and lengths differ in count"));
        }
        let rows = scalars
            .iter()
            .zip(lengths)
            .map(|(&r, &n)| RowRewards {
                values: vec![r; n],
                mask: vec![true; n],
                total: r,
            })
            .collect();
        Ok(Self {
            mode: RewardMode::Sequence,
            scalars: Some(scalars),
            ..Self::from_rows(rows)
        })
    }

    pub fn mode(&self) -> RewardMode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.cols + t]
    }

    pub fn is_valid(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.cols + t]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..i * self.cols + self.lengths[i]]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.cols..i * self.cols + self.lengths[i]]
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.lengths[i]
    }

    /// Verifier log-likelihood of each whole response (token mode) or the
    /// scalar reward (sequence mode).
    pub fn totals(&self) -> &[f64] {
        &self.totals
    }

    pub fn scalars(&self) -> Option<&[f64]> {
        self.scalars.as_deref()
    }

    /// Applies `f` to every unmasked entry (and to the sequence scalars).
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for (v, &m) in out.values.iter_mut().zip(&self.mask) {
            if m {
                *v = f(*v);
            }
        }
        if let Some(s) = &mut out.scalars {
            s.iter_mut().for_each(|v| *v = f(*v));
        }
        out
    }
}

/// Verifier ids and log-probabilities for `text` after `prompt`, including
/// the end-of-sequence token when `terminated`.
fn verifier_scores(
    prompt: &str,
    text: &str,
    terminated: bool,
    verifier: &dyn LanguageModel,
) -> Result<(TokenizedText, Vec<f64>)> {
    let tok = verifier.tokenizer();
    let prompt_ids = tok.encode(prompt)?.ids();
    let ver = tok.encode(text)?;
    let mut ids: Vec<TokenId> = ver.ids();
    if terminated {
        ids.push(verifier.eos().ok_or_else(|| {
            Error::domain("verifier has no end-of-sequence symbol to score a terminated response")
        })?);
    }
    let logprobs = token_logprobs(verifier, &prompt_ids, &ids)?;
    Ok((ver, logprobs))
}

/// Token-level rewards of one response whose generator segmentation is `gen`.
pub fn token_rewards_for(
    prompt: &str,
    gen: &TokenizedText,
    terminated: bool,
    verifier: &dyn LanguageModel,
) -> Result<RowRewards> {
    let (ver, logprobs) = verifier_scores(prompt, gen.text(), terminated, verifier)?;
    let aligned = align(gen, &ver)?.aligned_logprobs(&logprobs[..ver.len()])?;
    let mut values = aligned.values;
    let mut mask = aligned.valid;
    if terminated {
        values.push(logprobs[ver.len()]);
        mask.push(true);
    }
    Ok(RowRewards {
        values,
        mask,
        total: logprobs.iter().sum(),
    })
}

/// Per-token CME rewards (`r = -CME`) for a group of responses, at the
/// positions of the generator tokenizer's segmentation.
pub fn token_cme_rewards(
    prompt: &str,
    responses: &[Response],
    generator_tok: &Tokenizer,
    verifier: &dyn LanguageModel,
) -> Result<RewardMatrix> {
    let rows = responses
        .iter()
        .map(|r| {
            let gen = generator_tok.encode(&r.text)?;
            token_rewards_for(prompt, &gen, r.terminated, verifier)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardMatrix::from_rows(rows))
}

/// Mean verifier log-probability per verifier token of the response.
pub fn sequence_cme_reward(prompt: &str, response: &Response, verifier: &dyn LanguageModel) -> Result<f64> {
    let (_, logprobs) = verifier_scores(prompt, &response.text, response.terminated, verifier)?;
    if logprobs.is_empty() {
        return Err(Error::domain("sequence reward of an empty response is undefined"));
    }
    Ok(logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

/// Verifier log-likelihood of the whole response (sum over its tokens).
pub fn verifier_loglik(prompt: &str, response: &Response, verifier: &dyn LanguageModel) -> Result<f64> {
    let (_, logprobs) = verifier_scores(prompt, &response.text, response.terminated, verifier)?;
    Ok(logprobs.iter().sum())
}
