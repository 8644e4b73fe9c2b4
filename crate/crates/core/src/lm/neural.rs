use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bos_id, check_ids, LanguageModel};
use crate::error::{Error, Result};
use crate::text::{TokenId, Tokenizer};

/// Architecture and initialization of a [`TinyNeuralLM`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    /// Number of previous tokens the model sees.
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Standard deviation of the Gaussian parameter initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            window: 3,
            embed_dim: 8,
            hidden: 32,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Fixed-window neural language model:
/// embeddings of the last `window` tokens (begin-padded), one tanh hidden
/// layer, and a softmax output over the vocabulary plus end-of-sequence.
///
/// Parameters live in one flat vector laid out as
/// `[embeddings | hidden weights | hidden bias | output weights | output bias]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyNeuralLM {
    tokenizer: Tokenizer,
    config: NeuralConfig,
    params: Vec<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    inputs: Vec<TokenId>,
    x: Vec<f64>,
    h: Vec<f64>,
    pub log_probs: Vec<f64>,
}

struct Layout {
    v: usize,
    d: usize,
    w: usize,
    h: usize,
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: usize, cfg: &NeuralConfig) -> Self {
        let (v, d, w, h) = (vocab, cfg.embed_dim, cfg.window, cfg.hidden);
        let emb = 0;
        let w1 = emb + (v + 1) * d;
        let b1 = w1 + h * w * d;
        let w2 = b1 + h;
        let b2 = w2 + v * h;
        Self {
            v,
            d,
            w,
            h,
            emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + v,
        }
    }
}

impl TinyNeuralLM {
    /// Gaussian-initialized model; deterministic in `config.seed`.
    pub fn new(tokenizer: Tokenizer, config: NeuralConfig) -> Result<Self> {
        if config.window == 0 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::config("neural model dimensions must be positive"));
        }
        if !(config.init_scale >= 0.0 && config.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be finite and non-negative"));
        }
        let layout = Layout::new(tokenizer.vocab_size() + 1, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = if config.init_scale == 0.0 {
            vec![0.0; layout.total]
        } else {
            let normal = Normal::new(0.0, config.init_scale).expect("valid normal");
            (0..layout.total).map(|_| normal.sample(&mut rng)).collect()
        };
        Ok(Self {
            tokenizer,
            config,
            params,
        })
    }

    /// Model with explicit parameters; `config.init_scale` and `config.seed`
    /// are kept only as a record of how they were first drawn.
    pub fn from_params(tokenizer: Tokenizer, config: NeuralConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(tokenizer, NeuralConfig { init_scale: 0.0, ..config })?;
        m.set_params(params)?;
        m.config = config;
        Ok(m)
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::domain(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab_size(), &self.config)
    }

    pub fn forward(&self, context: &[TokenId]) -> Forward {
        let l = self.layout();
        let p = &self.params;
        let pad = l.w.saturating_sub(context.len());
        let mut inputs = vec![bos_id(l.v); pad];
        inputs.extend_from_slice(&context[context.len() - (l.w - pad)..]);

        let mut x = Vec::with_capacity(l.w * l.d);
        for &id in &inputs {
            x.extend_from_slice(&p[l.emb + id * l.d..l.emb + (id + 1) * l.d]);
        }
        let wd = l.w * l.d;
        let h: Vec<f64> = (0..l.h)
            .map(|j| {
                let row = &p[l.w1 + j * wd..l.w1 + (j + 1) * wd];
                let z = p[l.b1 + j] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                z.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..l.v)
            .map(|k| {
                let row = &p[l.w2 + k * l.h..l.w2 + (k + 1) * l.h];
                p[l.b2 + k] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_probs = logits.iter().map(|z| z - lse).collect();
        Forward {
            inputs,
            x,
            h,
            log_probs,
        }
    }

    /// Adds `∂(Σ_k dlogits[k]·logit_k)/∂θ` to `grad`.
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64], grad: &mut [f64]) {
        let l = self.layout();
        let p = &self.params;
        let wd = l.w * l.d;
        let mut dh = vec![0.0; l.h];
        for (k, &dz) in dlogits.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            grad[l.b2 + k] += dz;
            let base = l.w2 + k * l.h;
            for j in 0..l.h {
                grad[base + j] += dz * fwd.h[j];
                dh[j] += dz * p[base + j];
            }
        }
        let mut dx = vec![0.0; wd];
        for j in 0..l.h {
            let da = dh[j] * (1.0 - fwd.h[j] * fwd.h[j]);
            if da == 0.0 {
                continue;
            }
            grad[l.b1 + j] += da;
            let base = l.w1 + j * wd;
            for i in 0..wd {
                grad[base + i] += da * fwd.x[i];
                dx[i] += da * p[base + i];
            }
        }
        for (slot, &id) in fwd.inputs.iter().enumerate() {
            let base = l.emb + id * l.d;
            for i in 0..l.d {
                grad[base + i] += dx[slot * l.d + i];
            }
        }
    }

    /// Adds the gradient of `coef · log π(next | context)` to `grad`.
    pub fn accumulate_logprob_grad(&self, context: &[TokenId], next: TokenId, coef: f64, grad: &mut [f64]) {
        let fwd = self.forward(context);
        let dlogits: Vec<f64> = fwd
            .log_probs
            .iter()
            .enumerate()
            .map(|(k, lp)| coef * (f64::from(u8::from(k == next)) - lp.exp()))
            .collect();
        self.backward(&fwd, &dlogits, grad);
    }

    /// Gradient of `Σ_t log π(response[t] | prompt, response[..t])`.
    pub fn logprob_gradient(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        check_ids(self, prompt)?;
        check_ids(self, response)?;
        let mut grad = vec![0.0; self.num_params()];
        let mut context = prompt.to_vec();
        for &id in response {
            self.accumulate_logprob_grad(&context, id, 1.0, &mut grad);
            context.push(id);
        }
        Ok(grad)
    }
}

impl LanguageModel for TinyNeuralLM {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn log_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        self.forward(context).log_probs
    }
}
