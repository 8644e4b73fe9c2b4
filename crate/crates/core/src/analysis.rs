//! Exact enumeration of a model's response distribution and the quantities
//! derived from it: entropy, reverse KL, expected verifier log-likelihood and
//! the identity `E[r] = -H(π_θ) - KL(π_θ ‖ π_φ)` for shared tokenizers.
//!
//! The enumerated process is exactly the sampler's: generation stops at the
//! end-of-sequence symbol or after `max_len` tokens. Responses cut off at
//! `max_len` are kept as their own outcomes, so probabilities sum to one and
//! no renormalization takes place; their total is reported as the truncated
//! mass.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::{token_logprobs, LanguageModel, TinyNeuralLM};
use crate::rewards::{sequence_cme_reward, verifier_loglik, Response};
use crate::text::TokenId;

/// Default bound on the number of enumerated outcomes.
pub const DEFAULT_BUDGET: usize = 1_000_000;
/// Allowed deviation of the total enumerated mass from one.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// One complete response.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    /// Response ids without the end-of-sequence symbol.
    pub ids: Vec<TokenId>,
    pub terminated: bool,
    pub logprob: f64,
}

impl Outcome {
    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }

    /// Generated ids, end-of-sequence included when terminated.
    pub fn generated(&self, eos: Option<TokenId>) -> Vec<TokenId> {
        let mut ids = self.ids.clone();
        if self.terminated {
            ids.extend(eos);
        }
        ids
    }
}

/// All responses to one prompt with their probabilities.
#[derive(Clone, Debug)]
pub struct SequenceDistribution {
    prompt_ids: Vec<TokenId>,
    max_len: usize,
    eos: Option<TokenId>,
    outcomes: Vec<Outcome>,
    index: HashMap<(Vec<TokenId>, bool), usize>,
}

impl SequenceDistribution {
    pub fn prompt_ids(&self) -> &[TokenId] {
        &self.prompt_ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn get(&self, ids: &[TokenId], terminated: bool) -> Option<&Outcome> {
        self.index
            .get(&(ids.to_vec(), terminated))
            .map(|&i| &self.outcomes[i])
    }

    pub fn total_mass(&self) -> f64 {
        self.outcomes.iter().map(Outcome::prob).sum()
    }

    /// Probability of reaching `max_len` tokens without end-of-sequence.
    pub fn truncated_mass(&self) -> f64 {
        self.outcomes
            .iter()
            .filter(|o| !o.terminated)
            .map(Outcome::prob)
            .sum()
    }

    /// `H(p) = -Σ p log p`.
    pub fn entropy(&self) -> f64 {
        -self
            .outcomes
            .iter()
            .filter(|o| o.logprob > f64::NEG_INFINITY)
            .map(|o| o.prob() * o.logprob)
            .sum::<f64>()
    }

    /// `Σ p(y) f(y)` over the outcomes.
    pub fn expectation(&self, f: impl Fn(&Outcome) -> f64) -> f64 {
        self.outcomes
            .iter()
            .filter(|o| o.logprob > f64::NEG_INFINITY)
            .map(|o| o.prob() * f(o))
            .sum()
    }

    /// Fails unless the outcome probabilities sum to one within
    /// [`MASS_TOLERANCE`].
    pub fn check_mass(&self) -> Result<()> {
        let total = self.total_mass();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::domain(format!(
                "enumerated probabilities sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

/// Number of outcomes of the bounded process over `v` non-terminal tokens.
fn outcome_count(v: usize, max_len: usize, has_eos: bool) -> Option<usize> {
    let mut level = 1usize;
    let mut total = 0usize;
    for _ in 0..max_len {
        if has_eos {
            total = total.checked_add(level)?;
        }
        level = level.checked_mul(v)?;
    }
    total.checked_add(level)
}

fn expand(
    model: &dyn LanguageModel,
    prompt_ids: &[TokenId],
    prefix: Vec<TokenId>,
    logprob: f64,
    max_len: usize,
    out: &mut Vec<Outcome>,
) {
    if prefix.len() == max_len {
        out.push(Outcome { ids: prefix, terminated: false, logprob });
        return;
    }
    let mut context = prompt_ids.to_vec();
    context.extend_from_slice(&prefix);
    let logp = model.log_distribution(&context);
    let eos = model.eos();
    if let Some(e) = eos {
        out.push(Outcome { ids: prefix.clone(), terminated: true, logprob: logprob + logp[e] });
    }
    for (id, &lp) in logp.iter().enumerate() {
        if Some(id) == eos {
            continue;
        }
        let mut next = prefix.clone();
        next.push(id);
        expand(model, prompt_ids, next, logprob + lp, max_len, out);
    }
}

/// Enumerates every response of at most `max_len` generated tokens.
///
/// The first branching level is expanded in parallel; outcome order is the
/// same as a sequential depth-first walk.
pub fn enumerate_distribution(
    model: &dyn LanguageModel,
    prompt: &str,
    max_len: usize,
    budget: usize,
) -> Result<SequenceDistribution> {
    if max_len == 0 {
        return Err(Error::domain("max_len must be at least 1"));
    }
    let eos = model.eos();
    let text_vocab = model.vocab_size() - usize::from(eos.is_some());
    let count = outcome_count(text_vocab, max_len, eos.is_some())
        .filter(|&c| c <= budget)
        .ok_or(Error::BudgetExceeded { vocab: text_vocab, max_len, budget })?;
    let prompt_ids = model.tokenizer().encode(prompt)?.ids();

    let root = model.log_distribution(&prompt_ids);
    let mut outcomes = Vec::with_capacity(count);
    if let Some(e) = eos {
        outcomes.push(Outcome { ids: Vec::new(), terminated: true, logprob: root[e] });
    }
    let branches: Vec<Vec<Outcome>> = (0..root.len())
        .into_par_iter()
        .filter(|&id| Some(id) != eos)
        .map(|id| {
            let mut out = Vec::new();
            expand(model, &prompt_ids, vec![id], root[id], max_len, &mut out);
            out
        })
        .collect();
    outcomes.extend(branches.into_iter().flatten());

    let index = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| ((o.ids.clone(), o.terminated), i))
        .collect();
    Ok(SequenceDistribution { prompt_ids, max_len, eos, outcomes, index })
}

/// `KL(p ‖ q) = Σ p log(p / q)` over sequences.
pub fn exact_reverse_kl(p: &SequenceDistribution, q: &SequenceDistribution) -> Result<f64> {
    if p.max_len != q.max_len || p.len() != q.len() {
        return Err(Error::domain("distributions are enumerated over different sequence spaces"));
    }
    let mut kl = 0.0;
    for o in &p.outcomes {
        if o.logprob == f64::NEG_INFINITY {
            continue;
        }
        let lq = q
            .get(&o.ids, o.terminated)
            .map(|x| x.logprob)
            .filter(|&lq| lq > f64::NEG_INFINITY)
            .ok_or_else(|| {
                Error::domain(format!(
                    "sequence {:?} (terminated: {}) has positive probability under p but not under q",
                    o.ids, o.terminated
                ))
            })?;
        kl += o.prob() * (o.logprob - lq);
    }
    Ok(kl)
}

fn check_shared(gen: &dyn LanguageModel, ver: &dyn LanguageModel) -> Result<()> {
    if gen.tokenizer() != ver.tokenizer() || gen.vocab_size() != ver.vocab_size() || gen.eos() != ver.eos() {
        return Err(Error::domain(
            "the exact identity needs generator and verifier to share a tokenizer",
        ));
    }
    Ok(())
}

/// Exact reverse KL between two models sharing a tokenizer.
pub fn model_reverse_kl(
    p: &dyn LanguageModel,
    q: &dyn LanguageModel,
    prompt: &str,
    max_len: usize,
    budget: usize,
) -> Result<f64> {
    check_shared(p, q)?;
    let pd = enumerate_distribution(p, prompt, max_len, budget)?;
    let qd = enumerate_distribution(q, prompt, max_len, budget)?;
    exact_reverse_kl(&pd, &qd)
}

/// The three sides of `E[r] = -H - KL` and what is left over.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct IdentityCheck {
    /// `E_{π_θ}[log π_φ(y)]`, the expected sequence reward.
    pub expected_reward: f64,
    pub neg_entropy: f64,
    pub neg_kl: f64,
    /// `E[r] - (-H - KL)`.
    pub residual: f64,
    /// Probability of responses cut off at `max_len`.
    pub truncated_mass: f64,
}

/// Computes the identity terms by enumeration. The reward of each response is
/// the verifier's log-likelihood of the generated ids, scored independently
/// of the verifier's own enumeration.
pub fn exact_identity_check(
    gen: &dyn LanguageModel,
    ver: &dyn LanguageModel,
    prompt: &str,
    max_len: usize,
    budget: usize,
) -> Result<IdentityCheck> {
    check_shared(gen, ver)?;
    let p = enumerate_distribution(gen, prompt, max_len, budget)?;
    let q = enumerate_distribution(ver, prompt, max_len, budget)?;
    p.check_mass()?;
    q.check_mass()?;
    let mut expected_reward = 0.0;
    for o in p.outcomes.iter().filter(|o| o.logprob > f64::NEG_INFINITY) {
        let r: f64 = token_logprobs(ver, &p.prompt_ids, &o.generated(p.eos))?.iter().sum();
        expected_reward += o.prob() * r;
    }
    let neg_entropy = -p.entropy();
    let neg_kl = -exact_reverse_kl(&p, &q)?;
    Ok(IdentityCheck {
        expected_reward,
        neg_entropy,
        neg_kl,
        residual: expected_reward - (neg_entropy + neg_kl),
        truncated_mass: p.truncated_mass(),
    })
}

/// Expected reward `E_{π_θ}[-CME]` in its two forms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ExpectedCme {
    /// Verifier log-likelihood summed over the response's verifier tokens.
    pub sum: f64,
    /// The same, averaged per verifier token (the sequence-mode reward).
    pub mean: f64,
}

/// Scores every generator response through its text, so the verifier may use
/// a different tokenizer.
pub fn expected_cme_of(
    p: &SequenceDistribution,
    gen: &dyn LanguageModel,
    ver: &dyn LanguageModel,
    prompt: &str,
) -> Result<ExpectedCme> {
    let tok = gen.tokenizer();
    let mut sum = 0.0;
    let mut mean = 0.0;
    for o in p.outcomes.iter().filter(|o| o.logprob > f64::NEG_INFINITY) {
        let response = Response { text: tok.decode(&o.ids)?, terminated: o.terminated };
        sum += o.prob() * verifier_loglik(prompt, &response, ver)?;
        mean += o.prob() * sequence_cme_reward(prompt, &response, ver)?;
    }
    Ok(ExpectedCme { sum, mean })
}

pub fn expected_cme(
    gen: &dyn LanguageModel,
    ver: &dyn LanguageModel,
    prompt: &str,
    max_len: usize,
    budget: usize,
) -> Result<ExpectedCme> {
    let p = enumerate_distribution(gen, prompt, max_len, budget)?;
    expected_cme_of(&p, gen, ver, prompt)
}

/// Gradient of the sequence-mode CME-GRPO loss at `θ_old` when the sampled
/// group is replaced by the whole response distribution: every response
/// enters with its probability as weight, and advantages are standardized
/// under that distribution.
pub fn infinite_group_gradient(
    policy: &TinyNeuralLM,
    ver: &dyn LanguageModel,
    prompt: &str,
    max_len: usize,
    budget: usize,
) -> Result<Vec<f64>> {
    let p = enumerate_distribution(policy, prompt, max_len, budget)?;
    let tok = policy.tokenizer();
    let live: Vec<&Outcome> = p.outcomes.iter().filter(|o| o.logprob > f64::NEG_INFINITY).collect();
    let rewards = live
        .iter()
        .map(|o| {
            let response = Response { text: tok.decode(&o.ids)?, terminated: o.terminated };
            sequence_cme_reward(prompt, &response, ver)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean: f64 = live.iter().zip(&rewards).map(|(o, r)| o.prob() * r).sum();
    let var: f64 = live.iter().zip(&rewards).map(|(o, r)| o.prob() * (r - mean).powi(2)).sum();
    let std = var.sqrt();
    let mut grad = vec![0.0; policy.num_params()];
    if std < crate::grpo::MIN_STD {
        return Ok(grad);
    }
    for (o, r) in live.iter().zip(&rewards) {
        let ids = o.generated(p.eos);
        let coef = -o.prob() * (r - mean) / std / ids.len() as f64;
        let mut context = p.prompt_ids.clone();
        for &id in &ids {
            policy.accumulate_logprob_grad(&context, id, coef, &mut grad);
            context.push(id);
        }
    }
    Ok(grad)
}
