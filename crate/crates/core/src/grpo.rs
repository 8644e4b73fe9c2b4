//! Group-relative advantages and the clipped-surrogate CME-GRPO loss.
//!
//! ```text
//! L = -(1/G) Σ_i (1/|y_i|) Σ_t min(ρ_it·A_it, clip(ρ_it, 1-ε, 1+ε)·A_it) + β·KL(π_θ ‖ π_ref)
//! ```
//!
//! `|y_i|` counts the unmasked positions of response `i`; masked positions are
//! skipped entirely, and a response without unmasked positions contributes
//! nothing. The KL term is exact over the vocabulary and averaged over
//! every context visited by the group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TinyNeuralLM};
use crate::rewards::{RewardMatrix, RewardMode};
use crate::text::TokenId;
use crate::trainer::RolloutGroup;

/// Standard deviations below this make a position uninformative.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    /// Responses sampled per prompt (`G`).
    pub group_size: usize,
    /// PPO clipping range `ε`.
    pub clip_eps: f64,
    /// Weight `β` of the KL anchor to the reference policy.
    pub kl_coef: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_coef: 0.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return Err(Error::config("clip_eps must be positive"));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::config("kl_coef must be non-negative"));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of one normalized slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Advantages with the reward matrix's shape and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageMatrix {
    mode: RewardMode,
    cols: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    lengths: Vec<usize>,
    /// Per column in token mode, a single entry in sequence mode.
    stats: Vec<GroupStats>,
}

impl AdvantageMatrix {
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

    pub fn row_len(&self, i: usize) -> usize {
        self.lengths[i]
    }

    pub fn stats(&self) -> &[GroupStats] {
        &self.stats
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Overwrites one entry; used to probe masking.
    pub fn set(&mut self, i: usize, t: usize, value: f64) {
        self.values[i * self.cols + t] = value;
    }

    /// Mean absolute advantage over unmasked entries.
    pub fn mean_abs(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v.abs(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Standardizes `xs` with population statistics; zero when fewer than two
/// samples or a near-zero spread.
///
/// Centering sums pairwise differences, so adding an exactly representable
/// constant to every sample leaves the result bit-identical.
fn standardize(xs: &[f64]) -> (Vec<f64>, GroupStats) {
    let n = xs.len();
    let mean = if n == 0 { 0.0 } else { xs.iter().sum::<f64>() / n as f64 };
    if n < 2 {
        return (vec![0.0; n], GroupStats { mean, std: 0.0, count: n });
    }
    let centered: Vec<f64> = xs
        .iter()
        .map(|&x| xs.iter().map(|&y| x - y).sum::<f64>() / n as f64)
        .collect();
    let std = (centered.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    let stats = GroupStats { mean, std, count: n };
    if std < MIN_STD {
        return (vec![0.0; n], stats);
    }
    (centered.iter().map(|d| d / std).collect(), stats)
}

/// Per-position normalization across the group: column `t` is standardized
/// over the rows whose position `t` is unmasked.
pub fn normalize_token(rewards: &RewardMatrix, group_size: usize) -> Result<AdvantageMatrix> {
    if group_size < 2 {
        return Err(Error::domain("group size must be at least 2"));
    }
    if rewards.rows() != group_size {
        return Err(Error::domain(format!(
            "reward matrix has {} rows for a group of {group_size}",
            rewards.rows()
        )));
    }
    let (g, cols) = (rewards.rows(), rewards.cols());
    let mut values = vec![0.0; g * cols];
    let mut mask = vec![false; g * cols];
    let mut stats = Vec::with_capacity(cols);
    for t in 0..cols {
        let rows: Vec<usize> = (0..g).filter(|&i| rewards.is_valid(i, t)).collect();
        let xs: Vec<f64> = rows.iter().map(|&i| rewards.get(i, t)).collect();
        let (adv, st) = standardize(&xs);
        for (&i, a) in rows.iter().zip(adv) {
            values[i * cols + t] = a;
            mask[i * cols + t] = true;
        }
        stats.push(st);
    }
    Ok(AdvantageMatrix {
        mode: RewardMode::Token,
        cols,
        values,
        mask,
        lengths: (0..g).map(|i| rewards.row_len(i)).collect(),
        stats,
    })
}

/// Group-wide normalization of scalar rewards.
pub fn normalize_sequence(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain("group size must be at least 2"));
    }
    Ok(standardize(rewards).0)
}

/// Sequence-mode advantages: each response's scalar advantage broadcast over
/// its positions.
pub fn sequence_advantages(rewards: &RewardMatrix) -> Result<AdvantageMatrix> {
    let scalars = rewards
        .scalars()
        .ok_or_else(|| Error::domain("sequence advantages need a sequence-mode reward matrix"))?;
    if scalars.len() < 2 {
        return Err(Error::domain("group size must be at least 2"));
    }
    let (adv, st) = standardize(scalars);
    let (g, cols) = (rewards.rows(), rewards.cols());
    let mut values = vec![0.0; g * cols];
    let mut mask = vec![false; g * cols];
    for i in 0..g {
        for t in 0..rewards.row_len(i) {
            if rewards.is_valid(i, t) {
                values[i * cols + t] = adv[i];
                mask[i * cols + t] = true;
            }
        }
    }
    Ok(AdvantageMatrix {
        mode: RewardMode::Sequence,
        cols,
        values,
        mask,
        lengths: (0..g).map(|i| rewards.row_len(i)).collect(),
        stats: vec![st],
    })
}

/// Dispatches on the reward matrix's mode.
pub fn advantages(rewards: &RewardMatrix, group_size: usize) -> Result<AdvantageMatrix> {
    match rewards.mode() {
        RewardMode::Token => normalize_token(rewards, group_size),
        RewardMode::Sequence => sequence_advantages(rewards),
    }
}

/// `min(ρ·A, clip(ρ, 1-ε, 1+ε)·A)`.
pub fn clipped_surrogate(rho: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// Whether the gradient flows through `ρ`: the minimum picks the unclipped
/// term (ties count as unclipped).
fn unclipped_selected(rho: f64, advantage: f64, eps: f64) -> bool {
    rho * advantage <= rho.clamp(1.0 - eps, 1.0 + eps) * advantage
}

fn check_shared_tokenizer(a: &dyn LanguageModel, b: &dyn LanguageModel) -> Result<()> {
    if a.tokenizer() != b.tokenizer() || a.vocab_size() != b.vocab_size() {
        return Err(Error::domain("policy and reference must share a tokenizer"));
    }
    Ok(())
}

/// `KL(p ‖ q)` between two next-token distributions given as log-probs.
fn kl_logits(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum()
}

/// Mean over `contexts` of the exact next-token `KL(policy ‖ reference)`.
pub fn kl_to_reference(
    policy: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    contexts: &[Vec<TokenId>],
) -> Result<f64> {
    check_shared_tokenizer(policy, reference)?;
    if contexts.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = contexts
        .iter()
        .map(|c| kl_logits(&policy.log_distribution(c), &reference.log_distribution(c)))
        .sum();
    Ok(total / contexts.len() as f64)
}

/// Loss value, its gradient, and the two terms separately.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `(1/G) Σ_i (1/|y_i|) Σ_t surrogate`, before negation.
    pub surrogate: f64,
    /// Mean per-context KL to the reference (zero when `β = 0`).
    pub kl: f64,
}

/// CME-GRPO loss and its analytic gradient with respect to the policy
/// parameters. The reference is required when `cfg.kl_coef > 0`.
pub fn cme_grpo_loss(
    group: &RolloutGroup,
    advantages: &AdvantageMatrix,
    policy: &TinyNeuralLM,
    reference: Option<&dyn LanguageModel>,
    cfg: &GrpoConfig,
) -> Result<LossOutput> {
    let g = group.len();
    if g == 0 {
        return Err(Error::domain("empty rollout group"));
    }
    if advantages.rows() != g {
        return Err(Error::domain(format!(
            "advantages have {} rows for a group of {g}",
            advantages.rows()
        )));
    }
    let reference = if cfg.kl_coef > 0.0 {
        let r = reference.ok_or_else(|| Error::domain("a reference model is required when kl_coef > 0"))?;
        check_shared_tokenizer(policy, r)?;
        Some(r)
    } else {
        None
    };

    let mut grad = vec![0.0; policy.num_params()];
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_contexts = 0usize;
    let mut kl_grad = vec![0.0; policy.num_params()];

    for (i, r) in group.rollouts.iter().enumerate() {
        if advantages.row_len(i) != r.len() || r.old_logprobs.len() != r.len() {
            return Err(Error::domain(format!("row {i} length does not match its rollout")));
        }
        let valid: Vec<usize> = (0..r.len()).filter(|&t| advantages.is_valid(i, t)).collect();
        let n = valid.len() as f64;
        let mut context = group.prompt_ids.clone();
        let mut row_sum = 0.0;
        for t in 0..r.len() {
            let y = r.ids[t];
            let needs_policy = advantages.is_valid(i, t);
            if needs_policy || reference.is_some() {
                let fwd = policy.forward(&context);
                if needs_policy {
                    let a = advantages.get(i, t);
                    let rho = (fwd.log_probs[y] - r.old_logprobs[t]).exp();
                    row_sum += clipped_surrogate(rho, a, cfg.clip_eps);
                    if a != 0.0 && unclipped_selected(rho, a, cfg.clip_eps) {
                        // ∂(-ρA/(nG))/∂logits = -(A ρ / (n G)) (onehot(y) - p)
                        let coef = -a * rho / (n * g as f64);
                        let dlogits: Vec<f64> = fwd
                            .log_probs
                            .iter()
                            .enumerate()
                            .map(|(k, lp)| coef * (f64::from(u8::from(k == y)) - lp.exp()))
                            .collect();
                        policy.backward(&fwd, &dlogits, &mut grad);
                    }
                }
                if let Some(reference) = reference {
                    let logq = reference.log_distribution(&context);
                    let kl = kl_logits(&fwd.log_probs, &logq);
                    kl_sum += kl;
                    kl_contexts += 1;
                    // ∂KL/∂z_k = p_k (log p_k - log q_k - KL)
                    let dlogits: Vec<f64> = fwd
                        .log_probs
                        .iter()
                        .zip(&logq)
                        .map(|(&lp, &lq)| lp.exp() * (lp - lq - kl))
                        .collect();
                    policy.backward(&fwd, &dlogits, &mut kl_grad);
                }
            }
            context.push(y);
        }
        if !valid.is_empty() {
            surrogate += row_sum / n;
        }
    }
    surrogate /= g as f64;

    let mut loss = -surrogate;
    let mut kl = 0.0;
    if reference.is_some() && kl_contexts > 0 {
        kl = kl_sum / kl_contexts as f64;
        loss += cfg.kl_coef * kl;
        let scale = cfg.kl_coef / kl_contexts as f64;
        for (gi, k) in grad.iter_mut().zip(&kl_grad) {
            *gi += scale * k;
        }
    }
    Ok(LossOutput {
        loss,
        grad,
        surrogate,
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{NeuralConfig, UniformLM};
    use crate::rewards::RowRewards;
    use crate::text::{Alphabet, Tokenizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f64]]) -> RewardMatrix {
        RewardMatrix::from_rows(
            rows.iter()
                .map(|r| RowRewards {
                    values: r.to_vec(),
                    mask: vec![true; r.len()],
                    total: r.iter().sum(),
                })
                .collect(),
        )
    }

    #[test]
    fn column_standardization() {
        let m = matrix(&[&[1.0], &[2.0], &[3.0]]);
        let a = normalize_token(&m, 3).unwrap();
        // μ = 2, σ = sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        assert!((a.get(0, 0) - -1.0 / s).abs() < 1e-12);
        assert_eq!(a.get(1, 0), 0.0);
        assert!((a.get(2, 0) - 1.0 / s).abs() < 1e-12);
        assert!((a.get(2, 0) - 1.2247).abs() < 1e-4);
        assert_eq!(a.stats()[0].mean, 2.0);
    }

    #[test]
    fn degenerate_columns_are_zero() {
        let m = matrix(&[&[-1.0, 0.5], &[-1.0], &[-1.0]]);
        let a = normalize_token(&m, 3).unwrap();
        assert_eq!(a.get(0, 0), 0.0);
        assert_eq!(a.get(1, 0), 0.0);
        // only row 0 reaches position 1
        assert_eq!(a.get(0, 1), 0.0);
        assert!(!a.is_valid(1, 1));
    }

    #[test]
    fn masked_entries_excluded_from_statistics() {
        let mut rows: Vec<RowRewards> = [[1.0, 7.0], [3.0, 100.0], [5.0, 9.0]]
            .iter()
            .map(|r| RowRewards { values: r.to_vec(), mask: vec![true, true], total: 0.0 })
            .collect();
        rows[1].mask[1] = false;
        let a = normalize_token(&RewardMatrix::from_rows(rows), 3).unwrap();
        assert_eq!(a.get(0, 1), -1.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.get(2, 1), 1.0);
    }

    #[test]
    fn group_size_checks() {
        let m = matrix(&[&[1.0]]);
        assert!(normalize_token(&m, 1).is_err());
        assert!(normalize_token(&m, 2).is_err());
        assert!(normalize_sequence(&[1.0]).is_err());
    }

    #[test]
    fn sequence_normalization() {
        assert_eq!(normalize_sequence(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(normalize_sequence(&[-1.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        let base = normalize_sequence(&[0.25, -3.5, 1.0, 2.0]).unwrap();
        let shifted = normalize_sequence(&[10.25, 6.5, 11.0, 12.0]).unwrap();
        assert_eq!(base, shifted);
    }

    #[test]
    fn sequence_advantages_broadcast() {
        let m = RewardMatrix::from_scalars(vec![-1.0, 1.0], &[2, 3]).unwrap();
        let a = sequence_advantages(&m).unwrap();
        assert_eq!((a.get(0, 0), a.get(0, 1)), (-1.0, -1.0));
        assert_eq!((a.get(1, 0), a.get(1, 2)), (1.0, 1.0));
        assert!(!a.is_valid(0, 2));
        assert!(sequence_advantages(&matrix(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let xs: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..0.0)).collect();
            let (a, _) = standardize(&xs);
            let mean = a.iter().sum::<f64>() / 8.0;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        for a in [-2.0, -0.3, 0.0, 0.7, 5.0] {
            for eps in [0.01, 0.2, 0.9] {
                assert_eq!(clipped_surrogate(1.0, a, eps), a);
            }
        }
        // pessimistic branch: unclipped when it is smaller
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
    }

    fn tok() -> Tokenizer {
        Tokenizer::chars(Alphabet::new("abc").unwrap())
    }

    fn neural(seed: u64) -> TinyNeuralLM {
        TinyNeuralLM::new(
            tok(),
            NeuralConfig { window: 2, embed_dim: 3, hidden: 4, init_scale: 0.8, seed },
        )
        .unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        let p = neural(1);
        let ctxs = vec![vec![], vec![0, 1], vec![2]];
        assert_eq!(kl_to_reference(&p, &p, &ctxs).unwrap(), 0.0);
        let other = TinyNeuralLM::new(
            Tokenizer::chars(Alphabet::new("abd").unwrap()),
            NeuralConfig::default(),
        )
        .unwrap();
        assert!(kl_to_reference(&p, &other, &ctxs).is_err());
    }

    #[test]
    fn kl_point_mass_against_uniform() {
        let logp = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let logq = [(0.25f64).ln(); 4];
        assert!((kl_logits(&logp, &logq) - 4f64.ln()).abs() < 1e-15);
        assert!((kl_logits(&logp, &logq) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_direct_summation() {
        let p = neural(2);
        let q = neural(3);
        let ctxs = vec![vec![], vec![1], vec![0, 2, 1]];
        let got = kl_to_reference(&p, &q, &ctxs).unwrap();
        let mut oracle = 0.0;
        for c in &ctxs {
            let pd = p.distribution(c);
            let qd = q.distribution(c);
            for k in 0..pd.len() {
                oracle += pd[k] * (pd[k] / qd[k]).ln();
            }
        }
        oracle /= 3.0;
        assert!((got - oracle).abs() < 1e-12);
    }

    fn small_group(policy: &TinyNeuralLM) -> RolloutGroup {
        RolloutGroup::from_ids(policy, "a", &[(vec![0, 1], true), (vec![2, 2], true)]).unwrap()
    }

    #[test]
    fn on_policy_standardized_loss_is_zero() {
        let policy = neural(5);
        let group = small_group(&policy);
        let rewards = matrix(&[&[-1.0, -2.0, -0.5], &[-3.0, -0.1, -0.7]]);
        let adv = normalize_token(&rewards, 2).unwrap();
        let out = cme_grpo_loss(&group, &adv, &policy, None, &GrpoConfig::default()).unwrap();
        assert!(out.loss.abs() < 1e-15);
    }

    #[test]
    fn zero_advantages_give_zero_loss_and_gradient() {
        let policy = neural(6);
        let group = small_group(&policy);
        let adv = normalize_token(&matrix(&[&[-1.0; 3], &[-1.0; 3]]), 2).unwrap();
        let out = cme_grpo_loss(&group, &adv, &policy, None, &GrpoConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_term_requires_reference() {
        let policy = neural(6);
        let group = small_group(&policy);
        let adv = normalize_token(&matrix(&[&[-1.0; 3], &[-2.0; 3]]), 2).unwrap();
        let cfg = GrpoConfig { kl_coef: 0.1, ..GrpoConfig::default() };
        assert!(cme_grpo_loss(&group, &adv, &policy, None, &cfg).is_err());
        let u = UniformLM::new(tok(), true);
        let out = cme_grpo_loss(&group, &adv, &policy, Some(&u), &cfg).unwrap();
        assert!(out.kl > 0.0);
    }

    #[test]
    fn fully_masked_row_contributes_nothing() {
        let policy = neural(6);
        let group = small_group(&policy);
        let rows = vec![
            RowRewards { values: vec![-1.0; 3], mask: vec![true; 3], total: 0.0 },
            RowRewards { values: vec![-1.0; 3], mask: vec![false; 3], total: 0.0 },
        ];
        let adv = normalize_token(&RewardMatrix::from_rows(rows), 2).unwrap();
        let out = cme_grpo_loss(&group, &adv, &policy, None, &GrpoConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    fn perturbed(base: &TinyNeuralLM, scale: f64, seed: u64) -> TinyNeuralLM {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = base.clone();
        for p in m.params_mut() {
            *p += scale * rng.random_range(-1.0..1.0);
        }
        m
    }

    fn richer_group(old: &TinyNeuralLM) -> (RolloutGroup, AdvantageMatrix) {
        let group = RolloutGroup::from_ids(
            old,
            "ab",
            &[(vec![0, 1, 2], true), (vec![2], true), (vec![1, 1], false), (vec![0, 2, 2], true)],
        )
        .unwrap();
        let rewards = matrix(&[
            &[-1.0, -2.5, -0.25, -1.5],
            &[-3.0, -0.5],
            &[-0.75, -1.25],
            &[-2.0, -1.0, -4.0, -0.5],
        ]);
        let adv = normalize_token(&rewards, 4).unwrap();
        (group, adv)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let old = neural(11);
        let (group, adv) = richer_group(&old);
        let reference = neural(12);
        for (kl_coef, seed) in [(0.0, 1), (0.3, 2)] {
            let cfg = GrpoConfig { kl_coef, ..GrpoConfig::default() };
            let policy = perturbed(&old, 0.05, seed);
            // keep every ratio away from the clip boundaries
            for (i, r) in group.rollouts.iter().enumerate() {
                let lp = crate::lm::token_logprobs(&policy, &group.prompt_ids, &r.ids).unwrap();
                for (t, (new, old)) in lp.iter().zip(&r.old_logprobs).enumerate() {
                    let rho = (new - old).exp();
                    assert!((rho - 0.8).abs() > 1e-3 && (rho - 1.2).abs() > 1e-3, "row {i} pos {t}");
                }
            }
            let out = cme_grpo_loss(&group, &adv, &policy, Some(&reference), &cfg).unwrap();
            let h = 1e-5;
            for k in 0..policy.num_params() {
                let mut plus = policy.clone();
                plus.params_mut()[k] += h;
                let mut minus = policy.clone();
                minus.params_mut()[k] -= h;
                let lp = cme_grpo_loss(&group, &adv, &plus, Some(&reference), &cfg).unwrap().loss;
                let lm = cme_grpo_loss(&group, &adv, &minus, Some(&reference), &cfg).unwrap().loss;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = out.grad[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {k}: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn clipped_positions_carry_no_gradient() {
        let old = neural(11);
        let group = RolloutGroup::from_ids(&old, "a", &[(vec![0], true), (vec![1], true)]).unwrap();
        let adv = normalize_token(&matrix(&[&[-1.0, -1.0], &[-2.0, -2.0]]), 2).unwrap();
        let cfg = GrpoConfig { clip_eps: 1e-6, ..GrpoConfig::default() };
        let policy = perturbed(&old, 0.3, 9);
        let out = cme_grpo_loss(&group, &adv, &policy, None, &cfg).unwrap();
        // with a tiny ε, only positions where ρ moved against the advantage keep gradient
        let mut expected = vec![0.0; policy.num_params()];
        for (i, r) in group.rollouts.iter().enumerate() {
            let mut ctx = group.prompt_ids.clone();
            for t in 0..r.len() {
                let a = adv.get(i, t);
                let lp = policy.forward(&ctx).log_probs[r.ids[t]];
                let rho = (lp - r.old_logprobs[t]).exp();
                if unclipped_selected(rho, a, cfg.clip_eps) && a != 0.0 {
                    policy.accumulate_logprob_grad(&ctx, r.ids[t], -a * rho / (r.len() as f64 * 2.0), &mut expected);
                }
                ctx.push(r.ids[t]);
            }
        }
        for (g, e) in out.grad.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn on_policy_gradient_is_vanilla_policy_gradient() {
        let policy = neural(13);
        let (group, adv) = richer_group(&policy);
        let out = cme_grpo_loss(&group, &adv, &policy, None, &GrpoConfig::default()).unwrap();
        let mut expected = vec![0.0; policy.num_params()];
        for (i, r) in group.rollouts.iter().enumerate() {
            let n = r.len() as f64;
            let mut ctx = group.prompt_ids.clone();
            for t in 0..r.len() {
                policy.accumulate_logprob_grad(&ctx, r.ids[t], -adv.get(i, t) / (n * 4.0), &mut expected);
                ctx.push(r.ids[t]);
            }
        }
        for (g, e) in out.grad.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn masked_positions_have_bitwise_zero_influence() {
        let old = neural(14);
        let policy = perturbed(&old, 0.05, 3);
        let group = RolloutGroup::from_ids(&old, "b", &[(vec![0, 1], true), (vec![2, 0], true)]).unwrap();
        let rows = vec![
            RowRewards { values: vec![-1.0, -2.0, -0.5], mask: vec![true, false, true], total: 0.0 },
            RowRewards { values: vec![-3.0, -0.1, -0.7], mask: vec![true, false, true], total: 0.0 },
        ];
        let adv = normalize_token(&RewardMatrix::from_rows(rows), 2).unwrap();
        let base = cme_grpo_loss(&group, &adv, &policy, None, &GrpoConfig::default()).unwrap();
        let mut poked = adv.clone();
        poked.set(0, 1, 1e6);
        poked.set(1, 1, -1e6);
        let again = cme_grpo_loss(&group, &poked, &policy, None, &GrpoConfig::default()).unwrap();
        assert_eq!(base.loss.to_bits(), again.loss.to_bits());
        assert!(base.grad.iter().zip(&again.grad).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
