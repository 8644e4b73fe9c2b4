use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainOutput};
use crate::analysis;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, Model, TinyNeuralLM};

/// One verifier under comparison.
#[derive(Clone, Debug)]
pub struct SweepCondition {
    pub name: String,
    pub verifier: Model,
}

/// One line of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub name: String,
    pub verifier_kind: String,
    /// Per-character perplexity of the verifier on the gold distribution.
    pub verifier_perplexity: f64,
    pub initial_kl_gold: f64,
    pub final_kl_gold: f64,
    /// `initial_kl_gold - final_kl_gold`.
    pub kl_gold_improvement: f64,
    /// Final expected per-token verifier log-likelihood.
    pub final_expected_cme: f64,
    pub final_reverse_kl_verifier: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    /// Sorted by final KL to gold, best first.
    pub rows: Vec<SweepRow>,
    /// Training runs in condition order.
    pub runs: Vec<(String, TrainOutput)>,
}

/// Per-character perplexity of `verifier` on text drawn from `gold`, computed
/// exactly over the gold response distribution of each prompt. Each response
/// counts its characters plus one for the end of sequence when terminated.
pub fn verifier_perplexity(
    verifier: &dyn LanguageModel,
    gold: &dyn LanguageModel,
    prompts: &[String],
    max_len: usize,
    budget: usize,
) -> Result<f64> {
    let mut loglik = 0.0;
    let mut chars = 0.0;
    for prompt in prompts {
        let p = analysis::enumerate_distribution(gold, prompt, max_len, budget)?;
        loglik += analysis::expected_cme_of(&p, gold, verifier, prompt)?.sum;
        chars += p.expectation(|o| o.ids.len() as f64 + f64::from(u8::from(o.terminated)));
    }
    Ok((-loglik / chars).exp())
}

/// Trains one generator per verifier from the same initialization and seed
/// and ranks the conditions by final KL to the gold distribution.
pub fn verifier_sweep(
    generator: &TinyNeuralLM,
    conditions: &[SweepCondition],
    gold: &dyn LanguageModel,
    cfg: &TrainConfig,
) -> Result<SweepOutput> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(Error::config("a sweep needs at least one verifier"));
    }
    if !conditions.iter().any(|c| matches!(c.verifier, Model::Neural(_))) {
        return Err(Error::config(
            "a sweep needs a randomly initialized neural verifier as control",
        ));
    }
    let alphabet = generator.tokenizer().alphabet();
    for c in conditions {
        if c.verifier.tokenizer().alphabet() != alphabet {
            return Err(Error::config(format!(
                "verifier {:?} does not share the generator's alphabet",
                c.name
            )));
        }
    }
    if gold.tokenizer() != generator.tokenizer() {
        return Err(Error::config("the gold model must use the generator's tokenizer"));
    }
    let mut names: Vec<&str> = conditions.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("sweep condition names must be unique"));
    }

    let results = conditions
        .par_iter()
        .map(|c| {
            let run = train(generator, &c.verifier, Some(gold), cfg)?;
            let ppl = verifier_perplexity(&c.verifier, gold, &cfg.prompts, cfg.sampler.max_len, cfg.eval.budget)?;
            Ok((run, ppl))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(conditions.len());
    let mut runs = Vec::with_capacity(conditions.len());
    for (c, (run, ppl)) in conditions.iter().zip(results) {
        let first = &run.metrics[0];
        let last = &run.metrics[run.metrics.len() - 1];
        let kl = |m: &super::MetricsRecord| {
            m.kl_gold
                .ok_or_else(|| Error::domain("KL to gold is unavailable for the sweep"))
        };
        let (initial, fin) = (kl(first)?, kl(last)?);
        rows.push(SweepRow {
            rank: 0,
            name: c.name.clone(),
            verifier_kind: c.verifier.kind().to_string(),
            verifier_perplexity: ppl,
            initial_kl_gold: initial,
            final_kl_gold: fin,
            kl_gold_improvement: initial - fin,
            final_expected_cme: last.mean_reward,
            final_reverse_kl_verifier: last.reverse_kl_verifier,
        });
        runs.push((c.name.clone(), run));
    }
    rows.sort_by(|a, b| a.final_kl_gold.total_cmp(&b.final_kl_gold).then_with(|| a.name.cmp(&b.name)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(SweepOutput { rows, runs })
}
