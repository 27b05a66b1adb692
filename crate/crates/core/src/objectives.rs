//! Rewards, group-relative advantages and the four clipped surrogate
//! objectives (GRPO, DAPO and their token-reweighted forms).
//!
//! Every objective is recorded on a [`Graph`] so the trainer can
//! differentiate it; the `*_loss` helpers evaluate the same graph with the
//! current log-probabilities bound as a plain input. All values are
//! maximization objectives.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{usage, Result, TorError};
use crate::policy::RolloutBatch;
use crate::selection::WeightMask;
use crate::synthtask::{verify, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by `G`.
    #[default]
    Population,
    /// Divide by `G - 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Aggregation {
    /// `1/N sum_i 1/L_i sum_t`
    SequenceMean,
    /// `1/sum_i L_i sum_i sum_t`
    TokenLevel,
}

/// Clip bounds, KL weight and the advantage guard. The clip and KL defaults
/// are engine choices, not published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Symmetric clip for the GRPO objectives.
    pub epsilon: f64,
    /// Lower clip for the DAPO objectives.
    pub epsilon_low: f64,
    /// Upper clip for the DAPO objectives.
    pub epsilon_high: f64,
    /// KL weight for the GRPO objectives; DAPO has no KL term.
    pub beta: f64,
    pub advantage_epsilon: f64,
    pub std_mode: StdMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            epsilon_low: 0.2,
            epsilon_high: 0.28,
            beta: 0.01,
            advantage_epsilon: 1e-12,
            std_mode: StdMode::Population,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("objective.epsilon", self.epsilon),
            ("objective.epsilonLow", self.epsilon_low),
            ("objective.epsilonHigh", self.epsilon_high),
            ("objective.advantageEpsilon", self.advantage_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TorError::Config(format!("{name} = {v} must be positive")));
            }
        }
        if self.epsilon >= 1.0 || self.epsilon_low >= 1.0 {
            return Err(TorError::Config("lower clip bound must stay below 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TorError::Config(format!("objective.beta = {} must be nonnegative", self.beta)));
        }
        Ok(())
    }
}

/// One binary reward per rollout.
pub fn compute_rewards(batch: &RolloutBatch, vocab: &Vocab) -> Vec<f64> {
    batch
        .records
        .iter()
        .map(|r| f64::from(verify(vocab, &r.tokens, &batch.samples[r.sample_index].answer)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    /// One advantage per rollout, shared by all its tokens.
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `(R_i - mean) / (std + eps)`. Zero-variance groups get all-zero
/// advantages because every numerator vanishes.
pub fn group_advantage(rewards: &[f64], advantage_epsilon: f64, std_mode: StdMode) -> Result<GroupAdvantages> {
    let g = rewards.len();
    if g < 2 {
        return Err(usage(format!("group of {g} rollouts; need at least 2")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match std_mode {
        StdMode::Population => g as f64,
        StdMode::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    let advantages = if ss == 0.0 {
        vec![0.0; g]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + advantage_epsilon)).collect()
    };
    Ok(GroupAdvantages { advantages, mean, std })
}

/// Advantages for a whole batch, group by group.
pub fn batch_advantages(batch: &RolloutBatch, rewards: &[f64], cfg: &ObjectiveConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rewards.len());
    for group in rewards.chunks(batch.group_size) {
        out.extend(group_advantage(group, cfg.advantage_epsilon, cfg.std_mode)?.advantages);
    }
    Ok(out)
}

pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp()
}

/// `min(r A, clip(r, 1 - lo, 1 + hi) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage)
}

/// Nonnegative per-token KL estimate `e^x - x - 1`, `x = log pi_ref - log pi`.
pub fn kl_penalty(logp_theta: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_theta;
    x.exp() - x - 1.0
}

/// Indices of groups whose rewards are not all equal.
pub fn dynamic_sample_filter(group_rewards: &[Vec<f64>]) -> Vec<usize> {
    group_rewards
        .iter()
        .enumerate()
        .filter(|(_, g)| g.iter().any(|&r| r != g[0]))
        .map(|(i, _)| i)
        .collect()
}

/// Behavior-side quantities for a set of rollouts. Token arrays are
/// flattened rollout-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveInputs {
    pub lengths: Vec<usize>,
    pub logp_old: Vec<f64>,
    /// Reference-policy log-probs; required when the KL weight is nonzero.
    pub logp_ref: Option<Vec<f64>>,
    /// One per rollout.
    pub advantages: Vec<f64>,
}

impl ObjectiveInputs {
    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn from_batch(batch: &RolloutBatch, advantages: Vec<f64>, logp_ref: Option<Vec<f64>>) -> Self {
        Self {
            lengths: batch.records.iter().map(|r| r.len()).collect(),
            logp_old: batch.records.iter().flat_map(|r| r.logp_with_image.iter().copied()).collect(),
            logp_ref,
            advantages,
        }
    }

    fn check(&self, weights: Option<&[f64]>) -> Result<()> {
        let n = self.total_tokens();
        if self.lengths.is_empty() || n == 0 {
            return Err(TorError::DegenerateBatch("no rollouts to optimize".into()));
        }
        if self.lengths.contains(&0) {
            return Err(usage("empty rollout"));
        }
        if self.advantages.len() != self.lengths.len() {
            return Err(usage(format!("{} advantages for {} rollouts", self.advantages.len(), self.lengths.len())));
        }
        if self.logp_old.len() != n {
            return Err(usage(format!("{} old log-probs for {n} tokens", self.logp_old.len())));
        }
        if let Some(r) = &self.logp_ref {
            if r.len() != n {
                return Err(usage(format!("{} reference log-probs for {n} tokens", r.len())));
            }
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(usage(format!("mask of {} weights for {n} tokens", w.len())));
            }
        }
        Ok(())
    }

    /// Per-token advantage, broadcast from rollouts.
    fn token_advantages(&self) -> Vec<f64> {
        self.lengths.iter().zip(&self.advantages).flat_map(|(&l, &a)| std::iter::repeat_n(a, l)).collect()
    }

    /// Per-token aggregation coefficient.
    fn coefficients(&self, aggregation: Aggregation) -> Vec<f64> {
        match aggregation {
            Aggregation::SequenceMean => {
                let n = self.lengths.len() as f64;
                self.lengths.iter().flat_map(|&l| std::iter::repeat_n(1.0 / (n * l as f64), l)).collect()
            }
            Aggregation::TokenLevel => vec![1.0 / self.total_tokens() as f64; self.total_tokens()],
        }
    }
}

/// One of the four objectives, fully parameterized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub aggregation: Aggregation,
    pub eps_low: f64,
    pub eps_high: f64,
    /// KL weight; zero drops the term.
    pub beta: f64,
}

impl SurrogateSpec {
    pub fn grpo(cfg: &ObjectiveConfig) -> Self {
        Self { aggregation: Aggregation::SequenceMean, eps_low: cfg.epsilon, eps_high: cfg.epsilon, beta: cfg.beta }
    }

    pub fn dapo(cfg: &ObjectiveConfig) -> Self {
        Self { aggregation: Aggregation::TokenLevel, eps_low: cfg.epsilon_low, eps_high: cfg.epsilon_high, beta: 0.0 }
    }
}

/// Records `sum_t c_t [w_t min(r_t A_t, clip(r_t) A_t) - beta k3_t]` where
/// `c_t` is the aggregation coefficient. The KL term is never weighted by
/// the mask and the normalizers count every token.
pub fn record_objective(
    g: &mut Graph,
    logp_new: NodeId,
    inputs: &ObjectiveInputs,
    weights: Option<&[f64]>,
    spec: SurrogateSpec,
) -> Result<NodeId> {
    inputs.check(weights)?;
    if spec.beta > 0.0 && inputs.logp_ref.is_none() {
        return Err(usage("KL weight is nonzero but no reference log-probs were given"));
    }
    let coef = inputs.coefficients(spec.aggregation);
    let adv = Tensor::vector(inputs.token_advantages());
    let old = g.constant(Tensor::vector(inputs.logp_old.clone()));
    let diff = g.sub(logp_new, old);
    let ratio = g.exp(diff);
    let adv = g.constant(adv);
    let unclipped = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - spec.eps_low, 1.0 + spec.eps_high);
    let clipped = g.mul(clipped, adv);
    let term = g.minimum(unclipped, clipped);
    let scale: Vec<f64> = match weights {
        Some(w) => coef.iter().zip(w).map(|(c, w)| c * w).collect(),
        None => coef.clone(),
    };
    let scale = g.constant(Tensor::vector(scale));
    let weighted = g.mul(term, scale);
    let mut objective = g.sum(weighted);
    if spec.beta > 0.0 {
        let reference = g.constant(Tensor::vector(inputs.logp_ref.clone().unwrap()));
        let x = g.sub(reference, logp_new);
        let ex = g.exp(x);
        let k3 = g.sub(ex, x);
        let k3 = g.add_scalar(k3, -1.0);
        let kc = g.constant(Tensor::vector(coef.iter().map(|c| c * spec.beta).collect()));
        let kl = g.mul(k3, kc);
        let kl = g.sum(kl);
        objective = g.sub(objective, kl);
    }
    Ok(objective)
}

fn evaluate(logp_new: &[f64], inputs: &ObjectiveInputs, weights: Option<&[f64]>, spec: SurrogateSpec) -> Result<f64> {
    if logp_new.len() != inputs.total_tokens() {
        return Err(usage(format!("{} new log-probs for {} tokens", logp_new.len(), inputs.total_tokens())));
    }
    inputs.check(weights)?;
    let mut g = Graph::new();
    let lp = g.input("logp_new");
    let out = record_objective(&mut g, lp, inputs, weights, spec)?;
    g.set_output(out);
    let mut bind = std::collections::BTreeMap::new();
    bind.insert("logp_new".to_string(), Tensor::vector(logp_new.to_vec()));
    Ok(g.evaluate(&bind)?.item())
}

pub fn grpo_loss(logp_new: &[f64], inputs: &ObjectiveInputs, cfg: &ObjectiveConfig) -> Result<f64> {
    evaluate(logp_new, inputs, None, SurrogateSpec::grpo(cfg))
}

pub fn dapo_loss(logp_new: &[f64], inputs: &ObjectiveInputs, cfg: &ObjectiveConfig) -> Result<f64> {
    evaluate(logp_new, inputs, None, SurrogateSpec::dapo(cfg))
}

pub fn tor_grpo_loss(logp_new: &[f64], inputs: &ObjectiveInputs, mask: &WeightMask, cfg: &ObjectiveConfig) -> Result<f64> {
    evaluate(logp_new, inputs, Some(mask.weights()), SurrogateSpec::grpo(cfg))
}

pub fn tor_dapo_loss(logp_new: &[f64], inputs: &ObjectiveInputs, mask: &WeightMask, cfg: &ObjectiveConfig) -> Result<f64> {
    evaluate(logp_new, inputs, Some(mask.weights()), SurrogateSpec::dapo(cfg))
}

/// Diagnostics of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectiveStats {
    /// Aggregated `beta * KL` that was subtracted.
    pub kl_term: f64,
    pub mean_ratio: f64,
    /// Fraction of tokens where the clipped branch is the smaller one.
    pub clip_fraction: f64,
    /// Fraction of tokens with nonzero mask weight.
    pub masked_token_fraction: f64,
}

pub fn objective_stats(
    logp_new: &[f64],
    inputs: &ObjectiveInputs,
    weights: Option<&[f64]>,
    spec: SurrogateSpec,
) -> ObjectiveStats {
    let adv = inputs.token_advantages();
    let coef = inputs.coefficients(spec.aggregation);
    let n = logp_new.len().max(1) as f64;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    for t in 0..logp_new.len() {
        let r = importance_ratio(logp_new[t], inputs.logp_old[t]);
        ratio_sum += r;
        if r.clamp(1.0 - spec.eps_low, 1.0 + spec.eps_high) * adv[t] < r * adv[t] {
            clipped += 1;
        }
        if let (true, Some(reference)) = (spec.beta > 0.0, &inputs.logp_ref) {
            kl += coef[t] * spec.beta * kl_penalty(logp_new[t], reference[t]);
        }
    }
    let masked = weights.map_or(1.0, |w| w.iter().filter(|&&x| x != 0.0).count() as f64 / n);
    ObjectiveStats { kl_term: kl, mean_ratio: ratio_sum / n, clip_fraction: clipped as f64 / n, masked_token_fraction: masked }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantage(&[1.0, 0.0, 0.0, 0.0], 1e-12, StdMode::Population).unwrap();
        let expect = [1.732051, -0.577350, -0.577350, -0.577350];
        for (x, e) in a.advantages.iter().zip(expect) {
            assert!((x - e).abs() < 1e-6);
        }
        assert!((a.std - 0.4330127018922193).abs() < 1e-15);
        let z = group_advantage(&[1.0; 5], 1e-12, StdMode::Population).unwrap();
        assert!(z.advantages.iter().all(|&x| x == 0.0));
        let two = group_advantage(&[1.0, 0.0], 1e-12, StdMode::Population).unwrap();
        assert!((two.advantages[0] - 1.0).abs() < 1e-11 && (two.advantages[1] + 1.0).abs() < 1e-11);
        assert!(group_advantage(&[1.0], 1e-12, StdMode::Population).is_err());
    }

    #[test]
    fn sample_std_variant() {
        let a = group_advantage(&[1.0, 0.0], 0.0, StdMode::Sample).unwrap();
        assert!((a.std - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ratio_and_clip_examples() {
        assert_eq!(importance_ratio(-1.3, -1.3), 1.0);
        assert!((importance_ratio(-1.0 + 2f64.ln(), -1.0) - 2.0).abs() < 1e-15);
        assert!((clipped_term(1.5, 1.0, 0.2, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_term(1.1, 0.7, 0.2, 0.2), 1.1 * 0.7);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty(-0.7, -0.7), 0.0);
        assert!(kl_penalty(-0.1, -2.0) > 0.0);
        assert!(kl_penalty(-3.0, -0.2) > 0.0);
    }

    #[test]
    fn filter_examples() {
        let kept = dynamic_sample_filter(&[vec![1.0; 4], vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4]]);
        assert_eq!(kept, vec![1]);
    }

    fn two_rollouts() -> ObjectiveInputs {
        ObjectiveInputs {
            lengths: vec![1, 3],
            logp_old: vec![-0.5, -1.0, -0.2, -0.3],
            logp_ref: Some(vec![-0.5, -1.0, -0.2, -0.3]),
            advantages: vec![1.0, -1.0],
        }
    }

    #[test]
    fn aggregation_modes_differ() {
        let inputs = two_rollouts();
        let cfg = ObjectiveConfig::default();
        let new = inputs.logp_old.clone();
        assert!((dapo_loss(&new, &inputs, &cfg).unwrap() + 0.5).abs() < 1e-15);
        assert!(grpo_loss(&new, &inputs, &cfg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let inputs = two_rollouts();
        let cfg = ObjectiveConfig::default();
        assert!(matches!(grpo_loss(&[0.0; 3], &inputs, &cfg), Err(TorError::Usage(_))));
        let empty = ObjectiveInputs { lengths: vec![], logp_old: vec![], logp_ref: None, advantages: vec![] };
        assert!(matches!(dapo_loss(&[], &empty, &cfg), Err(TorError::DegenerateBatch(_))));
    }
}
