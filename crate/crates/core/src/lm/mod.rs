//! Autoregressive language models over a tokenizer's vocabulary plus an
//! end-of-sequence symbol.
//!
//! Every model exposes its full next-token distribution, so sequence
//! probabilities, KL divergences and entropies can be computed exactly.
//! Contexts are the full history (prompt followed by the response prefix);
//! each model truncates and pads it as its architecture requires.

mod checkpoint;
mod count;
mod markov;
mod neural;
mod sampler;

pub use checkpoint::{Model, CHECKPOINT_VERSION};
pub use count::{fit_count_lm, CountLM, CountOptions};
pub use markov::{GrammarSpec, MarkovLM};
pub use neural::{Forward, NeuralConfig, TinyNeuralLM};
pub use sampler::{sample_corpus, sample_response, Sample, SamplerConfig};

use crate::error::{Error, Result};
use crate::text::{TokenId, Tokenizer};

/// Next-token probability interface shared by the generator, verifier and
/// reference roles.
pub trait LanguageModel: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;

    /// Size of the next-token distribution.
    fn vocab_size(&self) -> usize {
        self.tokenizer().vocab_size() + 1
    }

    /// End-of-sequence id, the last id of the distribution.
    fn eos(&self) -> Option<TokenId> {
        Some(self.tokenizer().vocab_size())
    }

    /// Natural-log probabilities of every next token given `context`.
    fn log_distribution(&self, context: &[TokenId]) -> Vec<f64>;

    fn distribution(&self, context: &[TokenId]) -> Vec<f64> {
        self.log_distribution(context).into_iter().map(f64::exp).collect()
    }

    fn token_logprob(&self, context: &[TokenId], next: TokenId) -> f64 {
        self.log_distribution(context)[next]
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn tokenizer(&self) -> &Tokenizer {
        (**self).tokenizer()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos(&self) -> Option<TokenId> {
        (**self).eos()
    }
    fn log_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        (**self).log_distribution(context)
    }
    fn token_logprob(&self, context: &[TokenId], next: TokenId) -> f64 {
        (**self).token_logprob(context, next)
    }
}

/// Padding id used in front of short contexts; one past the last output id.
pub(crate) fn bos_id(vocab_size: usize) -> TokenId {
    vocab_size
}

pub(crate) fn check_ids(model: &dyn LanguageModel, ids: &[TokenId]) -> Result<()> {
    let v = model.vocab_size();
    match ids.iter().find(|&&id| id >= v) {
        Some(id) => Err(Error::domain(format!(
            "token id {id} outside model vocabulary of {v}"
        ))),
        None => Ok(()),
    }
}

/// Log-probability of each response token given the prompt and the response
/// prefix before it.
pub fn token_logprobs(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<f64>> {
    check_ids(model, prompt)?;
    check_ids(model, response)?;
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(response.len());
    for &id in response {
        out.push(model.token_logprob(&context, id));
        context.push(id);
    }
    Ok(out)
}

/// Chain-rule log-probability of `response` after `prompt`.
pub fn sequence_logprob(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    Ok(token_logprobs(model, prompt, response)?.iter().sum())
}

/// Equal probability for every token; optionally without an end-of-sequence
/// symbol, in which case sequences never terminate on their own.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformLM {
    tokenizer: Tokenizer,
    with_eos: bool,
}

impl UniformLM {
    pub fn new(tokenizer: Tokenizer, with_eos: bool) -> Self {
        Self { tokenizer, with_eos }
    }
}

impl LanguageModel for UniformLM {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size() + usize::from(self.with_eos)
    }

    fn eos(&self) -> Option<TokenId> {
        self.with_eos.then(|| self.tokenizer.vocab_size())
    }

    fn log_distribution(&self, _context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size();
        vec![-(v as f64).ln(); v]
    }
}
