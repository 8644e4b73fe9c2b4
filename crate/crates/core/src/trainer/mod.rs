//! CME-GRPO training loop, exact evaluation and the verifier sweep.
//!
//! Each step takes the next prompt in round-robin order, samples a group from
//! the current policy, scores it with the frozen verifier, normalizes the
//! rewards within the group and applies one optimizer update. All randomness
//! comes from one ChaCha stream seeded by `sampler.seed`.

mod optim;
mod output;
mod rollout;
mod sweep;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, SequenceDistribution};
use crate::error::{Error, Result};
use crate::grpo::{self, GrpoConfig};
use crate::lm::{sample_response, token_logprobs, LanguageModel, SamplerConfig, TinyNeuralLM};
use crate::rewards::{sequence_cme_reward, token_rewards_for, verifier_loglik, RewardMatrix, RewardMode};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use output::{checkpoint_path, write_metrics_csv, write_sweep_csv, write_timing_csv, RunWriter};
pub use rollout::{Rollout, RolloutGroup};
pub use sweep::{verifier_perplexity, verifier_sweep, SweepCondition, SweepOutput, SweepRow};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps; zero evaluates only at the start and end.
    pub every: usize,
    /// Largest number of sequences enumerated per prompt for exact metrics.
    pub budget: usize,
    /// Monte Carlo samples per prompt when enumeration exceeds the budget;
    /// zero makes that case an error.
    pub fallback_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 25,
            budget: analysis::DEFAULT_BUDGET,
            fallback_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub reward_mode: RewardMode,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub prompts: Vec<String>,
    pub steps: usize,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.sampler.validate()?;
        self.optimizer.validate()?;
        if self.sampler.temperature <= 0.0 {
            return Err(Error::config("training needs a positive sampling temperature"));
        }
        if self.prompts.is_empty() {
            return Err(Error::config("at least one prompt is required"));
        }
        if self.eval.budget == 0 {
            return Err(Error::config("eval budget must be positive"));
        }
        Ok(())
    }

    fn is_eval_step(&self, step: usize) -> bool {
        step == 0 || step == self.steps || (self.eval.every > 0 && step.is_multiple_of(self.eval.every))
    }
}

/// Policy quality at one point of training, averaged over the prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Expected per-token verifier log-likelihood (the sequence-mode reward).
    pub mean_reward: f64,
    /// Expected total verifier log-likelihood.
    pub expected_cme_sum: f64,
    /// `KL(π_θ ‖ π_φ)`; absent when the tokenizers differ.
    pub reverse_kl_verifier: Option<f64>,
    /// `KL(π_θ ‖ gold)`; absent without a gold model or with a different tokenizer.
    pub kl_gold: Option<f64>,
    pub entropy: f64,
    pub truncated_mass: f64,
    /// Monte Carlo samples per prompt, zero for exact enumeration.
    pub eval_samples: usize,
}

/// One row of the metrics series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean |advantage| of the group used at this step.
    pub mean_abs_advantage: Option<f64>,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub reverse_kl_verifier: Option<f64>,
    pub kl_gold: Option<f64>,
    pub entropy: f64,
    pub expected_cme_sum: f64,
    pub truncated_mass: f64,
    pub eval_samples: usize,
}

impl MetricsRecord {
    fn new(step: usize, eval: EvalMetrics, last: Option<&StepStats>) -> Self {
        Self {
            step,
            mean_reward: eval.mean_reward,
            mean_abs_advantage: last.map(|s| s.mean_abs_advantage),
            loss: last.map(|s| s.loss),
            grad_norm: last.map(|s| s.grad_norm),
            reverse_kl_verifier: eval.reverse_kl_verifier,
            kl_gold: eval.kl_gold,
            entropy: eval.entropy,
            expected_cme_sum: eval.expected_cme_sum,
            truncated_mass: eval.truncated_mass,
            eval_samples: eval.eval_samples,
        }
    }
}

fn shares_tokenizer(a: &dyn LanguageModel, b: &dyn LanguageModel) -> bool {
    a.tokenizer() == b.tokenizer() && a.vocab_size() == b.vocab_size() && a.eos() == b.eos()
}

struct PromptMetrics {
    mean: f64,
    sum: f64,
    kl_ver: Option<f64>,
    kl_gold: Option<f64>,
    entropy: f64,
    truncated: f64,
}

fn exact_prompt_metrics(
    p: &SequenceDistribution,
    policy: &dyn LanguageModel,
    verifier: &dyn LanguageModel,
    gold: Option<&dyn LanguageModel>,
    prompt: &str,
    budget: usize,
) -> Result<PromptMetrics> {
    let cme = analysis::expected_cme_of(p, policy, verifier, prompt)?;
    let kl_to = |q: &dyn LanguageModel| -> Result<f64> {
        let qd = analysis::enumerate_distribution(q, prompt, p.max_len(), budget)?;
        analysis::exact_reverse_kl(p, &qd)
    };
    let kl_ver = shares_tokenizer(policy, verifier).then(|| kl_to(verifier)).transpose()?;
    let kl_gold = gold
        .filter(|g| shares_tokenizer(policy, *g))
        .map(kl_to)
        .transpose()?;
    Ok(PromptMetrics {
        mean: cme.mean,
        sum: cme.sum,
        kl_ver,
        kl_gold,
        entropy: p.entropy(),
        truncated: p.truncated_mass(),
    })
}

fn sampled_prompt_metrics(
    policy: &dyn LanguageModel,
    verifier: &dyn LanguageModel,
    gold: Option<&dyn LanguageModel>,
    prompt: &str,
    sampler: &SamplerConfig,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PromptMetrics> {
    let tok = policy.tokenizer();
    let prompt_ids = tok.encode(prompt)?.ids();
    let cfg = SamplerConfig { temperature: 1.0, ..*sampler };
    let log_ratio = |q: &dyn LanguageModel, ids: &[usize], lp: f64| -> Result<f64> {
        Ok(lp - token_logprobs(q, &prompt_ids, ids)?.iter().sum::<f64>())
    };
    let ver_shared = shares_tokenizer(policy, verifier);
    let gold = gold.filter(|g| shares_tokenizer(policy, *g));
    let mut acc = PromptMetrics {
        mean: 0.0,
        sum: 0.0,
        kl_ver: ver_shared.then_some(0.0),
        kl_gold: gold.map(|_| 0.0),
        entropy: 0.0,
        truncated: 0.0,
    };
    for _ in 0..samples {
        let s = sample_response(policy, &prompt_ids, &cfg, rng);
        let lp: f64 = s.logprobs.iter().sum();
        let response = crate::rewards::Response {
            text: tok.decode(s.text_ids())?,
            terminated: s.terminated,
        };
        acc.mean += sequence_cme_reward(prompt, &response, verifier)?;
        acc.sum += verifier_loglik(prompt, &response, verifier)?;
        acc.entropy -= lp;
        acc.truncated += f64::from(u8::from(!s.terminated));
        if let Some(k) = acc.kl_ver.as_mut() {
            *k += log_ratio(verifier, &s.ids, lp)?;
        }
        if let (Some(k), Some(g)) = (acc.kl_gold.as_mut(), gold) {
            *k += log_ratio(g, &s.ids, lp)?;
        }
    }
    let n = samples as f64;
    Ok(PromptMetrics {
        mean: acc.mean / n,
        sum: acc.sum / n,
        kl_ver: acc.kl_ver.map(|k| k / n),
        kl_gold: acc.kl_gold.map(|k| k / n),
        entropy: acc.entropy / n,
        truncated: acc.truncated / n,
    })
}

/// Exact metrics by enumeration, or Monte Carlo estimates when the
/// enumeration budget is exceeded and `cfg.fallback_samples > 0`.
pub fn evaluate(
    policy: &dyn LanguageModel,
    verifier: &dyn LanguageModel,
    gold: Option<&dyn LanguageModel>,
    prompts: &[String],
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalMetrics> {
    if prompts.is_empty() {
        return Err(Error::domain("evaluation needs at least one prompt"));
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut samples = 0;
    for prompt in prompts {
        let m = match analysis::enumerate_distribution(policy, prompt, sampler.max_len, cfg.budget) {
            Ok(p) => exact_prompt_metrics(&p, policy, verifier, gold, prompt, cfg.budget)?,
            Err(Error::BudgetExceeded { .. }) if cfg.fallback_samples > 0 => {
                samples = cfg.fallback_samples;
                sampled_prompt_metrics(policy, verifier, gold, prompt, sampler, samples, rng)?
            }
            Err(e) => return Err(e),
        };
        per_prompt.push(m);
    }
    let n = per_prompt.len() as f64;
    let avg = |f: &dyn Fn(&PromptMetrics) -> f64| per_prompt.iter().map(f).sum::<f64>() / n;
    let avg_opt = |f: &dyn Fn(&PromptMetrics) -> Option<f64>| {
        per_prompt
            .iter()
            .map(f)
            .sum::<Option<f64>>()
            .map(|s| s / n)
    };
    Ok(EvalMetrics {
        mean_reward: avg(&|m| m.mean),
        expected_cme_sum: avg(&|m| m.sum),
        reverse_kl_verifier: avg_opt(&|m| m.kl_ver),
        kl_gold: avg_opt(&|m| m.kl_gold),
        entropy: avg(&|m| m.entropy),
        truncated_mass: avg(&|m| m.truncated),
        eval_samples: samples,
    })
}

/// Rewards for a sampled group; responses are scored concurrently and merged
/// by index.
pub fn group_rewards(group: &RolloutGroup, verifier: &dyn LanguageModel, mode: RewardMode) -> Result<RewardMatrix> {
    match mode {
        RewardMode::Token => {
            let rows = group
                .rollouts
                .par_iter()
                .map(|r| token_rewards_for(&group.prompt, &r.text, r.terminated, verifier))
                .collect::<Result<Vec<_>>>()?;
            Ok(RewardMatrix::from_rows(rows))
        }
        RewardMode::Sequence => {
            let scalars = group
                .rollouts
                .par_iter()
                .map(|r| sequence_cme_reward(&group.prompt, &r.response(), verifier))
                .collect::<Result<Vec<_>>>()?;
            RewardMatrix::from_scalars(scalars, &group.lengths())
        }
    }
}

struct StepStats {
    loss: f64,
    grad_norm: f64,
    mean_abs_advantage: f64,
}

/// Trained model, its metrics series and the wall-clock seconds elapsed at
/// each record.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: TinyNeuralLM,
    pub metrics: Vec<MetricsRecord>,
    pub wall_clock: Vec<f64>,
}

fn non_finite(step: usize, group: &RolloutGroup, rewards: &RewardMatrix, loss: f64) -> Error {
    let responses: Vec<_> = group
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            serde_json::json!({
                "text": r.text.text(),
                "terminated": r.terminated,
                "rewards": (0..rewards.row_len(i)).map(|t| rewards.get(i, t).to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let diagnostic = serde_json::json!({
        "step": step,
        "prompt": group.prompt,
        "loss": loss.to_string(),
        "responses": responses,
    });
    Error::NonFinite { step, diagnostic: diagnostic.to_string() }
}

/// Runs `cfg.steps` CME-GRPO updates on a copy of `generator`.
///
/// `on_record` sees every metrics record together with the policy it
/// describes, e.g. to write checkpoints.
pub fn train_with(
    generator: &TinyNeuralLM,
    verifier: &dyn LanguageModel,
    gold: Option<&dyn LanguageModel>,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&MetricsRecord, &TinyNeuralLM) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut policy = generator.clone();
    let reference = (cfg.grpo.kl_coef > 0.0).then(|| generator.clone());
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    eval_rng.set_stream(1);
    let mut metrics = Vec::new();
    let mut wall_clock = Vec::new();
    let mut last: Option<StepStats> = None;

    for step in 0..=cfg.steps {
        if step > 0 {
            let prompt = &cfg.prompts[(step - 1) % cfg.prompts.len()];
            let group = RolloutGroup::sample(&policy, prompt, cfg.grpo.group_size, &cfg.sampler, &mut rng)?;
            let rewards = group_rewards(&group, verifier, cfg.reward_mode)?;
            let adv = grpo::advantages(&rewards, cfg.grpo.group_size)?;
            let out = grpo::cme_grpo_loss(
                &group,
                &adv,
                &policy,
                reference.as_ref().map(|r| r as &dyn LanguageModel),
                &cfg.grpo,
            )?;
            if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(non_finite(step, &group, &rewards, out.loss));
            }
            let grad_norm = optimizer.step(policy.params_mut(), &out.grad);
            last = Some(StepStats {
                loss: out.loss,
                grad_norm,
                mean_abs_advantage: adv.mean_abs(),
            });
        }
        if cfg.is_eval_step(step) {
            let eval = evaluate(&policy, verifier, gold, &cfg.prompts, &cfg.sampler, &cfg.eval, &mut eval_rng)?;
            let record = MetricsRecord::new(step, eval, last.as_ref());
            on_record(&record, &policy)?;
            metrics.push(record);
            wall_clock.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(TrainOutput {
        model: policy,
        metrics,
        wall_clock,
    })
}

pub fn train(
    generator: &TinyNeuralLM,
    verifier: &dyn LanguageModel,
    gold: Option<&dyn LanguageModel>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_with(generator, verifier, gold, cfg, &mut |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{MarkovLM, NeuralConfig, UniformLM};
    use crate::text::{Alphabet, Tokenizer};

    fn tok() -> Tokenizer {
        Tokenizer::chars(Alphabet::new("abcd").unwrap())
    }

    fn generator() -> TinyNeuralLM {
        TinyNeuralLM::new(tok(), NeuralConfig { hidden: 8, ..NeuralConfig::default() }).unwrap()
    }

    fn config(steps: usize) -> TrainConfig {
        TrainConfig {
            grpo: GrpoConfig { group_size: 4, ..GrpoConfig::default() },
            sampler: SamplerConfig { max_len: 3, ..SamplerConfig::default() },
            reward_mode: RewardMode::Token,
            optimizer: OptimizerConfig::default(),
            prompts: vec!["a".into(), "b".into()],
            steps,
            eval: EvalConfig { every: 2, ..EvalConfig::default() },
        }
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let g = generator();
        let v = MarkovLM::new(Default::default()).unwrap();
        let out = train(&g, &v, Some(&v), &config(0)).unwrap();
        assert_eq!(out.model, g);
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].step, 0);
        assert!(out.metrics[0].loss.is_none());
    }

    #[test]
    fn runs_are_deterministic() {
        let g = generator();
        let v = MarkovLM::new(Default::default()).unwrap();
        for mode in [RewardMode::Token, RewardMode::Sequence] {
            let cfg = TrainConfig { reward_mode: mode, ..config(5) };
            let a = train(&g, &v, None, &cfg).unwrap();
            let b = train(&g, &v, None, &cfg).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.model, b.model);
            let steps: Vec<usize> = a.metrics.iter().map(|m| m.step).collect();
            assert_eq!(steps, vec![0, 2, 4, 5]);
            assert_ne!(a.model, g);
        }
    }

    #[test]
    fn seed_changes_the_run() {
        let g = generator();
        let v = MarkovLM::new(Default::default()).unwrap();
        let a = train(&g, &v, None, &config(3)).unwrap();
        let mut cfg = config(3);
        cfg.sampler.seed = 1;
        let b = train(&g, &v, None, &cfg).unwrap();
        assert_ne!(a.model, b.model);
    }

    #[test]
    fn kl_anchor_runs_with_reference() {
        let g = generator();
        let v = MarkovLM::new(Default::default()).unwrap();
        let mut cfg = config(3);
        cfg.grpo.kl_coef = 0.1;
        let out = train(&g, &v, None, &cfg).unwrap();
        assert!(out.metrics.iter().all(|m| m.loss.is_none_or(f64::is_finite)));
    }

    #[test]
    fn exact_and_sampled_evaluation_agree() {
        let g = generator();
        let v = MarkovLM::new(Default::default()).unwrap();
        let prompts = vec!["ab".to_string()];
        let sampler = SamplerConfig { max_len: 3, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exact = evaluate(&g, &v, Some(&v), &prompts, &sampler, &EvalConfig::default(), &mut rng).unwrap();
        let tight = EvalConfig { budget: 10, fallback_samples: 20_000, ..EvalConfig::default() };
        let est = evaluate(&g, &v, Some(&v), &prompts, &sampler, &tight, &mut rng).unwrap();
        assert_eq!(est.eval_samples, 20_000);
        assert!((exact.entropy - est.entropy).abs() < 0.05);
        assert!((exact.mean_reward - est.mean_reward).abs() < 0.05);
        assert!((exact.kl_gold.unwrap() - est.kl_gold.unwrap()).abs() < 0.05);
        let strict = EvalConfig { budget: 10, ..EvalConfig::default() };
        assert!(evaluate(&g, &v, None, &prompts, &sampler, &strict, &mut rng).is_err());
    }

    #[test]
    fn cross_tokenizer_verifier_has_no_reverse_kl() {
        let g = generator();
        let merged = Tokenizer::new(
            Alphabet::new("abcd").unwrap(),
            crate::text::MergeTable::from_pairs([("a", "b")]),
        )
        .unwrap();
        let v = UniformLM::new(merged, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = evaluate(&g, &v, None, &["a".into()], &SamplerConfig { max_len: 2, ..Default::default() }, &EvalConfig::default(), &mut rng)
            .unwrap();
        assert!(m.reverse_kl_verifier.is_none());
        assert!(m.mean_reward < 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let g = generator();
        let v = UniformLM::new(tok(), true);
        let mut cfg = config(1);
        cfg.prompts.clear();
        assert!(train(&g, &v, None, &cfg).is_err());
        let mut cfg = config(1);
        cfg.grpo.group_size = 1;
        assert!(train(&g, &v, None, &cfg).is_err());
        let mut cfg = config(1);
        cfg.sampler.temperature = 0.0;
        assert!(train(&g, &v, None, &cfg).is_err());
    }
}
