use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::{sample_response, LanguageModel, SamplerConfig};
use crate::rewards::Response;
use crate::text::{TokenId, TokenizedText};

/// One sampled response with the sampling policy's log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Generator ids, ending with end-of-sequence when `terminated`.
    pub ids: Vec<TokenId>,
    /// `log π_old` of each id in `ids`.
    pub old_logprobs: Vec<f64>,
    /// Generator segmentation of the response text (end-of-sequence excluded).
    pub text: TokenizedText,
    pub terminated: bool,
}

impl Rollout {
    pub fn response(&self) -> Response {
        Response {
            text: self.text.text().to_string(),
            terminated: self.terminated,
        }
    }

    /// Number of generator positions, end-of-sequence included.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `G` responses to one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: String,
    /// Prompt under the generator tokenizer.
    pub prompt_ids: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    /// Samples `group_size` responses from `policy`.
    pub fn sample<R: Rng + ?Sized>(
        policy: &dyn LanguageModel,
        prompt: &str,
        group_size: usize,
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let tok = policy.tokenizer();
        let prompt_ids = tok.encode(prompt)?.ids();
        let rollouts = (0..group_size)
            .map(|_| {
                let s = sample_response(policy, &prompt_ids, cfg, rng);
                Ok(Rollout {
                    text: tok.decode_spanned(s.text_ids())?,
                    ids: s.ids,
                    old_logprobs: s.logprobs,
                    terminated: s.terminated,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt: prompt.to_string(),
            prompt_ids,
            rollouts,
        })
    }

    /// Builds a group from explicit responses scored by `policy`; old
    /// log-probabilities are the policy's current ones.
    pub fn from_ids(policy: &dyn LanguageModel, prompt: &str, responses: &[(Vec<TokenId>, bool)]) -> Result<Self> {
        let tok = policy.tokenizer();
        let prompt_ids = tok.encode(prompt)?.ids();
        let eos = policy.eos();
        let rollouts = responses
            .iter()
            .map(|(text_ids, terminated)| {
                let mut ids = text_ids.clone();
                if *terminated {
                    ids.push(eos.ok_or_else(|| Error::domain("policy has no end-of-sequence symbol"))?);
                }
                Ok(Rollout {
                    old_logprobs: crate::lm::token_logprobs(policy, &prompt_ids, &ids)?,
                    text: tok.decode_spanned(text_ids)?,
                    ids,
                    terminated: *terminated,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt: prompt.to_string(),
            prompt_ids,
            rollouts,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.rollouts.iter().map(Rollout::len).collect()
    }
}
