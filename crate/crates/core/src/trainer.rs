//! The collect / score / select / update loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{finite_difference_check, FdReport, Graph, Tensor};
use crate::error::{Result, TorError};
use crate::objectives::{
    batch_advantages, compute_rewards, dynamic_sample_filter, objective_stats, record_objective, ObjectiveConfig,
    ObjectiveInputs, SurrogateSpec,
};
use crate::policy::{Architecture, Condition, PolicyConfig, PolicyParams, RolloutBatch};
use crate::scoring::{build_score_table, ScoreField, ScoreOptions, TokenScoreTable};
use crate::selection::{build_weight_mask, select_tokens, SelectionConfig, TokenSet, WeightMask};
use crate::synthtask::{generate_sample, symbol_name, verify, SyntheticSample, TaskConfig, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Algorithm {
    #[default]
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "dapo")]
    Dapo,
    #[serde(rename = "tor-grpo")]
    TorGrpo,
    #[serde(rename = "tor-dapo")]
    TorDapo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Grpo, Algorithm::Dapo, Algorithm::TorGrpo, Algorithm::TorDapo];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
            Algorithm::TorGrpo => "tor-grpo",
            Algorithm::TorDapo => "tor-dapo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn is_tor(self) -> bool {
        matches!(self, Algorithm::TorGrpo | Algorithm::TorDapo)
    }

    pub fn is_dapo(self) -> bool {
        matches!(self, Algorithm::Dapo | Algorithm::TorDapo)
    }

    pub fn surrogate(self, cfg: &ObjectiveConfig) -> SurrogateSpec {
        if self.is_dapo() {
            SurrogateSpec::dapo(cfg)
        } else {
            SurrogateSpec::grpo(cfg)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient ascent.
    #[default]
    Sgd,
    /// Heavy-ball momentum.
    Momentum,
    Adam,
}

/// Loop settings; the `[trainer]` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Samples per rollout batch (`B`).
    pub rollout_batch_size: usize,
    /// Rollouts per sample (`G`).
    pub group_size: usize,
    /// Optimizer mini-batch, in rollouts.
    pub global_batch_size: usize,
    pub learning_rate: f64,
    pub total_rollout_batches: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Passes over each rollout batch.
    pub epochs: usize,
    /// Write a checkpoint every this many rollout batches (0 disables).
    pub checkpoint_every: usize,
    /// Supervised steps on answer-format targets before RL starts.
    pub warmup_steps: usize,
    pub warmup_learning_rate: f64,
    /// Held-out samples for greedy evaluation.
    pub eval_samples: usize,
    pub rng_seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rollout_batch_size: 32,
            group_size: 8,
            global_batch_size: 64,
            learning_rate: 1e-3,
            total_rollout_batches: 300,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            epochs: 1,
            checkpoint_every: 50,
            warmup_steps: 40,
            warmup_learning_rate: 1e-2,
            eval_samples: 200,
            rng_seed: 1,
        }
    }
}

/// A complete run description: algorithm plus one section per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub selection: SelectionConfig,
    pub objective: ObjectiveConfig,
    pub trainer: LoopConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.policy.validate()?;
        self.selection.validate()?;
        self.objective.validate()?;
        let t = &self.trainer;
        let bad = |m: String| Err(TorError::Config(m));
        if t.rollout_batch_size == 0 {
            return bad("trainer.rolloutBatchSize must be positive".into());
        }
        if t.group_size < 2 {
            return bad(format!("trainer.groupSize = {} must be at least 2", t.group_size));
        }
        if t.global_batch_size == 0 || t.global_batch_size > t.rollout_batch_size * t.group_size {
            return bad(format!(
                "trainer.globalBatchSize = {} must be in 1..={}",
                t.global_batch_size,
                t.rollout_batch_size * t.group_size
            ));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("trainer.learningRate = {} must be positive", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad(format!("trainer.momentum = {} outside [0, 1)", t.momentum));
        }
        if t.epochs == 0 {
            return bad("trainer.epochs must be positive".into());
        }
        if t.warmup_steps > 0 && !(t.warmup_learning_rate > 0.0) {
            return bad("trainer.warmupLearningRate must be positive".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(&self.policy, &self.task)
    }
}

/// SplitMix64 finalizer; derives independent seeds from `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_TASK: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_WARMUP: u64 = 5;
pub(crate) const STREAM_ANALYSIS: u64 = 6;

/// Training samples of rollout batch `batch`.
pub fn batch_samples(cfg: &TrainConfig, batch: u64) -> Vec<SyntheticSample> {
    (0..cfg.trainer.rollout_batch_size as u64)
        .map(|b| generate_sample(derive_seed(cfg.trainer.rng_seed, STREAM_TASK, batch << 16 | b), &cfg.task))
        .collect()
}

/// Held-out samples drawn from the training distribution.
pub fn eval_samples(cfg: &TrainConfig) -> Vec<SyntheticSample> {
    (0..cfg.trainer.eval_samples as u64)
        .map(|k| generate_sample(derive_seed(cfg.trainer.rng_seed, STREAM_EVAL, k), &cfg.task))
        .collect()
}

/// Mean reward of greedy decoding.
pub fn greedy_reward(params: &PolicyParams, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let vocab = params.vocab();
    let mut total = 0.0;
    for s in samples {
        total += f64::from(verify(&vocab, &params.greedy_decode(s)?, &s.answer));
    }
    Ok(total / samples.len() as f64)
}

/// First-order optimizer state. Steps ascend.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Self { kind, lr, momentum, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// `params += step(grad)`; tensors are visited in name order.
    pub fn ascend(&mut self, params: &mut PolicyParams, grads: &std::collections::BTreeMap<String, Tensor>) {
        if self.m.is_empty() {
            self.m = params.tensors().values().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - f64::powi(b1, self.t as i32);
        let c2 = 1.0 - f64::powi(b2, self.t as i32);
        for (k, (name, p)) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (w, &gj)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                match self.kind {
                    OptimizerKind::Sgd => *w += self.lr * gj,
                    OptimizerKind::Momentum => {
                        m[j] = self.momentum * m[j] + gj;
                        *w += self.lr * m[j];
                    }
                    OptimizerKind::Adam => {
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        *w += self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// A random well-formed answer for `sample`'s question family.
fn random_answer(rng: &mut ChaCha8Rng, task: &TaskConfig, sample: &SyntheticSample) -> String {
    if sample.question[0] == Vocab::COMPARE {
        symbol_name(rng.random_range(1..=task.alphabet_size as u32))
    } else {
        rng.random_range(0..=task.cells()).to_string()
    }
}

/// Teaches the answer format with answers drawn at random, so the image
/// carries no signal yet. Returns the mean negative log-likelihood of the
/// last step.
pub fn format_warmup(params: &mut PolicyParams, cfg: &TrainConfig) -> Result<f64> {
    let t = &cfg.trainer;
    let vocab = params.vocab();
    let mut opt = Optimizer::new(OptimizerKind::Adam, t.warmup_learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.rng_seed, STREAM_WARMUP, 0));
    let mut last = f64::NAN;
    for step in 0..t.warmup_steps as u64 {
        let mut g = Graph::new();
        let mut nodes = Vec::new();
        let mut count = 0usize;
        for k in 0..t.rollout_batch_size as u64 {
            let sample = generate_sample(derive_seed(t.rng_seed, STREAM_WARMUP, (step + 1) << 16 | k), &cfg.task);
            let answer = random_answer(&mut rng, &cfg.task, &sample);
            let mut target = vec![Vocab::ANS_START];
            target.extend(vocab.answer_tokens(&answer).expect("answer is expressible"));
            target.extend([Vocab::ANS_END, Vocab::EOS]);
            count += target.len();
            nodes.push(params.tape_log_probs(&mut g, &sample.cells(), &sample.question, &target)?);
        }
        let all = g.concat(&nodes);
        let total = g.sum(all);
        let mean = g.scale(total, 1.0 / count as f64);
        g.set_output(mean);
        last = -g.evaluate(&*params)?.item();
        let grads = g.backward()?;
        opt.ascend(params, &grads);
    }
    Ok(last)
}

/// Parameters plus everything the loop carries between rollout batches.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    reference: PolicyParams,
    pub optimizer: Optimizer,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed rollout batches.
    pub batches: u64,
}

impl TrainState {
    /// Random initialization followed by the format warm-up. The result is
    /// also the frozen reference policy.
    pub fn initialize(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = PolicyParams::init(cfg.architecture(), derive_seed(cfg.trainer.rng_seed, STREAM_INIT, 0));
        format_warmup(&mut params, cfg)?;
        Ok(Self::from_params(params, cfg))
    }

    pub fn from_params(params: PolicyParams, cfg: &TrainConfig) -> Self {
        let t = &cfg.trainer;
        Self {
            reference: params.clone(),
            params,
            optimizer: Optimizer::new(t.optimizer, t.learning_rate, t.momentum),
            step: 0,
            batches: 0,
        }
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }
}

/// One scored and selected rollout batch.
#[derive(Debug, Clone)]
pub struct Collected {
    /// What the update trains on (after dynamic sampling for DAPO variants).
    pub batch: RolloutBatch,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Mean reward over every sampled rollout, before filtering.
    pub mean_reward: f64,
    pub table: TokenScoreTable,
    pub reasoning: TokenSet,
    pub perception: TokenSet,
    /// `None` for the unweighted algorithms.
    pub mask: Option<WeightMask>,
    pub logp_ref: Option<Vec<f64>>,
}

impl Collected {
    pub fn overlap(&self) -> usize {
        self.reasoning.intersection(&self.perception).count()
    }

    /// `|Tr n Tp| / |Tr u Tp|`, zero for empty sets.
    pub fn overlap_ratio(&self) -> f64 {
        let inter = self.overlap();
        let union = self.reasoning.len() + self.perception.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Samples, rewards, scores and selects one rollout batch under the
/// current parameters.
pub fn collect_rollout_batch(state: &TrainState, cfg: &TrainConfig) -> Result<Collected> {
    let t = &cfg.trainer;
    let vocab = Vocab::for_task(&cfg.task);
    let samples = batch_samples(cfg, state.batches);
    let sample = |attempt: u64| {
        state.params.sample_rollouts(
            &samples,
            t.group_size,
            cfg.policy.top_p,
            cfg.policy.max_len,
            derive_seed(t.rng_seed, STREAM_ROLLOUT, state.batches << 8 | attempt),
        )
    };
    let mut batch = sample(0)?;
    let mut rewards = compute_rewards(&batch, &vocab);
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    if cfg.algorithm.is_dapo() {
        let mut keep = dynamic_sample_filter(&groups(&rewards, t.group_size));
        if keep.is_empty() {
            batch = sample(1)?;
            rewards = compute_rewards(&batch, &vocab);
            keep = dynamic_sample_filter(&groups(&rewards, t.group_size));
        }
        if keep.is_empty() {
            return Err(TorError::DegenerateBatch(format!(
                "every group of rollout batch {} has zero reward variance after one resample",
                state.batches
            )));
        }
        batch = batch.retain_groups(&keep);
        rewards = keep.iter().flat_map(|&b| rewards[b * t.group_size..(b + 1) * t.group_size].to_vec()).collect();
    }
    let advantages = batch_advantages(&batch, &rewards, &cfg.objective)?;
    let opts = ScoreOptions { entropy_mode: cfg.selection.entropy_mode, ..ScoreOptions::new(cfg.policy.top_p) };
    let table = build_score_table(&batch, &state.params, opts)?;
    let reasoning = select_tokens(&table, ScoreField::Entropy, cfg.selection.alpha_r)?;
    let perception = select_tokens(&table, ScoreField::Sensitivity, cfg.selection.alpha_p)?;
    let mask = if cfg.algorithm.is_tor() {
        Some(build_weight_mask(&reasoning, &perception, &cfg.selection, &batch)?)
    } else {
        None
    };
    let logp_ref = if cfg.algorithm.surrogate(&cfg.objective).beta > 0.0 {
        Some(state.reference.score_batch(&batch, Condition::Image)?.concat())
    } else {
        None
    };
    Ok(Collected { batch, rewards, advantages, mean_reward, table, reasoning, perception, mask, logp_ref })
}

fn groups(rewards: &[f64], g: usize) -> Vec<Vec<f64>> {
    rewards.chunks(g).map(<[f64]>::to_vec).collect()
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StepRecord {
    pub step: u64,
    pub objective: f64,
    pub kl_term: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub masked_token_fraction: f64,
}

/// Records the objective of rollouts `range` of `c` on a fresh graph bound
/// to the current parameters. Returns the graph, its per-token log-prob
/// node and the objective inputs.
pub fn minibatch_graph(
    params: &PolicyParams,
    c: &Collected,
    range: std::ops::Range<usize>,
    cfg: &TrainConfig,
) -> Result<(Graph, crate::diffcore::NodeId, ObjectiveInputs, Option<Vec<f64>>)> {
    let records = &c.batch.records[range.clone()];
    let offset: usize = c.batch.records[..range.start].iter().map(|r| r.len()).sum();
    let n: usize = records.iter().map(|r| r.len()).sum();
    let inputs = ObjectiveInputs {
        lengths: records.iter().map(|r| r.len()).collect(),
        logp_old: records.iter().flat_map(|r| r.logp_with_image.iter().copied()).collect(),
        logp_ref: c.logp_ref.as_ref().map(|v| v[offset..offset + n].to_vec()),
        advantages: c.advantages[range].to_vec(),
    };
    let weights = c.mask.as_ref().map(|m| m.weights()[offset..offset + n].to_vec());
    let mut g = Graph::new();
    let mut nodes = Vec::with_capacity(records.len());
    for group in records.chunk_by(|x, y| x.sample_index == y.sample_index) {
        let s = &c.batch.samples[group[0].sample_index];
        let responses: Vec<&[usize]> = group.iter().map(|r| r.tokens.as_slice()).collect();
        nodes.extend(params.tape_group_log_probs(&mut g, &s.cells(), &s.question, &responses)?);
    }
    let logp = g.concat(&nodes);
    let out = record_objective(&mut g, logp, &inputs, weights.as_deref(), cfg.algorithm.surrogate(&cfg.objective))?;
    g.set_output(out);
    Ok((g, logp, inputs, weights))
}

/// Mini-batch gradient ascent over one collected batch. Advances the
/// version tag once.
pub fn update_step(state: &mut TrainState, c: &Collected, cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    if let Some(v) = c.batch.behavior_version() {
        if v != state.params.version_tag {
            return Err(TorError::Stale { batch: v, params: state.params.version_tag });
        }
    }
    let n = c.batch.records.len();
    let mb = cfg.trainer.global_batch_size.max(1);
    let spec = cfg.algorithm.surrogate(&cfg.objective);
    let mut out = Vec::new();
    for _ in 0..cfg.trainer.epochs.max(1) {
        for (k, start) in (0..n).step_by(mb).enumerate() {
            let range = start..(start + mb).min(n);
            let (mut g, logp, inputs, weights) = minibatch_graph(&state.params, c, range.clone(), cfg)?;
            let diverged = |detail: String| TorError::Diverged {
                batch: state.batches,
                minibatch: k,
                dump: minibatch_dump(c, range.clone(), &detail),
            };
            let objective = match g.evaluate(&state.params) {
                Ok(v) => v.item(),
                Err(TorError::Numeric { node, op }) => return Err(diverged(format!("node {node} ({op})"))),
                Err(e) => return Err(e),
            };
            let grads = g.backward()?;
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(diverged(format!("gradient of {name}")));
            }
            let logp_new = g.value(logp).map(|t| t.values().to_vec()).unwrap_or_default();
            let stats = objective_stats(&logp_new, &inputs, weights.as_deref(), spec);
            state.optimizer.ascend(&mut state.params, &grads);
            if !state.params.is_finite() {
                return Err(diverged("parameters after the step".into()));
            }
            state.step += 1;
            out.push(StepRecord {
                step: state.step,
                objective,
                kl_term: stats.kl_term,
                mean_ratio: stats.mean_ratio,
                clip_fraction: stats.clip_fraction,
                masked_token_fraction: stats.masked_token_fraction,
            });
        }
    }
    state.params.version_tag += 1;
    Ok(out)
}

fn minibatch_dump(c: &Collected, range: std::ops::Range<usize>, detail: &str) -> String {
    let rollouts: Vec<_> = range
        .map(|r| {
            let rec = &c.batch.records[r];
            serde_json::json!({
                "b": rec.sample_index,
                "i": rec.group_index,
                "tokens": rec.tokens,
                "logpOld": rec.logp_with_image,
                "advantage": c.advantages[r],
            })
        })
        .collect();
    serde_json::json!({ "detail": detail, "rollouts": rollouts }).to_string()
}

/// One metrics row per rollout batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsRow {
    pub batch: u64,
    pub mean_reward: f64,
    /// Mean over the batch's optimizer steps; null when the update was skipped.
    pub objective: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub overlap_ratio: f64,
    /// `|Tr n Tp|` over all scored tokens.
    pub overlap_of_total: f64,
    pub masked_fraction_reasoning: f64,
    pub masked_fraction_perception: f64,
    pub mean_entropy_selected: Option<f64>,
    pub mean_sensitivity_selected: Option<f64>,
}

fn mean_over(table: &TokenScoreTable, set: &TokenSet, field: ScoreField) -> Option<f64> {
    let col = table.column(field)?;
    let picked: Vec<f64> = table
        .rows
        .iter()
        .zip(col)
        .filter(|(r, _)| set.contains(&crate::selection::TokenIndex { b: r.b, i: r.i, t: r.t }))
        .map(|(_, v)| v)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

pub fn metrics_row(batch: u64, c: &Collected, steps: &[StepRecord]) -> MetricsRow {
    let total = c.table.len().max(1) as f64;
    let avg = |f: fn(&StepRecord) -> f64| {
        (!steps.is_empty()).then(|| steps.iter().map(f).sum::<f64>() / steps.len() as f64)
    };
    MetricsRow {
        batch,
        mean_reward: c.mean_reward,
        objective: avg(|s| s.objective),
        clip_fraction: avg(|s| s.clip_fraction),
        overlap_ratio: c.overlap_ratio(),
        overlap_of_total: c.overlap() as f64 / total,
        masked_fraction_reasoning: c.reasoning.len() as f64 / total,
        masked_fraction_perception: c.perception.len() as f64 / total,
        mean_entropy_selected: mean_over(&c.table, &c.reasoning, ScoreField::Entropy),
        mean_sensitivity_selected: mean_over(&c.table, &c.perception, ScoreField::Sensitivity),
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsRow>,
    pub steps: Vec<StepRecord>,
    /// Greedy reward on held-out samples before and after training.
    pub initial_greedy_reward: f64,
    pub final_greedy_reward: f64,
    /// Per-batch reasoning and perception sets, kept when requested.
    pub selections: Vec<(TokenSet, TokenSet)>,
    /// Scored tokens of each kept batch, aligned with `selections`.
    pub scored_tokens: Vec<usize>,
    /// Files written under the output directory, relative to it.
    pub files: Vec<PathBuf>,
}

/// Artifact options for [`train_loop`].
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Directory receiving `metrics.jsonl`, `objective.jsonl` and
    /// `checkpoints/`. Nothing is written when `None`.
    pub dir: Option<PathBuf>,
    pub keep_selections: bool,
}

struct Writers {
    dir: PathBuf,
    metrics: BufWriter<File>,
    objective: BufWriter<File>,
    files: Vec<PathBuf>,
}

impl Writers {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            objective: BufWriter::new(File::create(dir.join("objective.jsonl"))?),
            files: vec!["metrics.jsonl".into(), "objective.jsonl".into()],
        })
    }

    fn checkpoint(&mut self, name: &str, params: &PolicyParams) -> Result<()> {
        let rel = PathBuf::from("checkpoints").join(name);
        params.save(&self.dir.join(&rel))?;
        self.files.push(rel);
        Ok(())
    }
}

/// Runs `totalRolloutBatches` collect/update iterations from a fresh
/// initialization.
pub fn train_loop(cfg: &TrainConfig, output: &RunOutput) -> Result<TrainOutcome> {
    let state = TrainState::initialize(cfg)?;
    train_from(state, cfg, output)
}

/// As [`train_loop`], starting from an existing state.
pub fn train_from(mut state: TrainState, cfg: &TrainConfig, output: &RunOutput) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut writers = output.dir.as_deref().map(Writers::open).transpose()?;
    if let Some(w) = writers.as_mut() {
        w.checkpoint("initial.ckpt", &state.params)?;
    }
    let evals = eval_samples(cfg);
    let initial_greedy_reward = greedy_reward(&state.params, &evals)?;
    let mut history = Vec::new();
    let mut all_steps = Vec::new();
    let mut selections = Vec::new();
    let mut scored_tokens = Vec::new();
    for _ in 0..cfg.trainer.total_rollout_batches {
        let batch_index = state.batches;
        let (row, steps) = match collect_rollout_batch(&state, cfg) {
            Ok(c) => {
                let steps = match update_step(&mut state, &c, cfg) {
                    Ok(s) => s,
                    Err(e) => {
                        if let Some(w) = writers.as_mut() {
                            w.metrics.flush()?;
                            w.objective.flush()?;
                        }
                        return Err(e);
                    }
                };
                if output.keep_selections {
                    selections.push((c.reasoning.clone(), c.perception.clone()));
                    scored_tokens.push(c.table.len());
                }
                (metrics_row(batch_index, &c, &steps), steps)
            }
            Err(TorError::DegenerateBatch(_)) => {
                // Nothing to learn from; the batch still counts.
                state.params.version_tag += 1;
                let row = MetricsRow {
                    batch: batch_index,
                    mean_reward: degenerate_reward(&state, cfg)?,
                    objective: None,
                    clip_fraction: None,
                    overlap_ratio: 0.0,
                    overlap_of_total: 0.0,
                    masked_fraction_reasoning: 0.0,
                    masked_fraction_perception: 0.0,
                    mean_entropy_selected: None,
                    mean_sensitivity_selected: None,
                };
                (row, Vec::new())
            }
            Err(e) => return Err(e),
        };
        state.batches += 1;
        if let Some(w) = writers.as_mut() {
            serde_json::to_writer(&mut w.metrics, &row)?;
            w.metrics.write_all(b"\n")?;
            for s in &steps {
                serde_json::to_writer(&mut w.objective, s)?;
                w.objective.write_all(b"\n")?;
            }
            let every = cfg.trainer.checkpoint_every;
            if every > 0 && state.batches.is_multiple_of(every as u64) {
                w.checkpoint(&format!("batch-{:05}.ckpt", state.batches), &state.params)?;
            }
        }
        history.push(row);
        all_steps.extend(steps);
    }
    let final_greedy_reward = greedy_reward(&state.params, &evals)?;
    let mut files = Vec::new();
    if let Some(mut w) = writers {
        w.checkpoint("final.ckpt", &state.params)?;
        w.metrics.flush()?;
        w.objective.flush()?;
        files = w.files;
    }
    Ok(TrainOutcome {
        state,
        history,
        steps: all_steps,
        initial_greedy_reward,
        final_greedy_reward,
        selections,
        scored_tokens,
        files,
    })
}

/// Mean reward of a fully filtered batch: zero-variance groups are either
/// all correct or all wrong, so recount from a fresh sample of the same seed.
fn degenerate_reward(state: &TrainState, cfg: &TrainConfig) -> Result<f64> {
    let t = &cfg.trainer;
    let samples = batch_samples(cfg, state.batches);
    let mut params = state.params.clone();
    params.version_tag -= 1;
    let batch = params.sample_rollouts(
        &samples,
        t.group_size,
        cfg.policy.top_p,
        cfg.policy.max_len,
        derive_seed(t.rng_seed, STREAM_ROLLOUT, state.batches << 8),
    )?;
    let r = compute_rewards(&batch, &Vocab::for_task(&cfg.task));
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Final rewards of one compare variant across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub failed: usize,
    /// Over the successful runs; population standard deviation.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// One entry per seed, `None` where the run failed.
    pub values: Vec<Option<f64>>,
}

pub fn summarize(variant: &str, values: Vec<Option<f64>>) -> SummaryRow {
    let ok: Vec<f64> = values.iter().flatten().copied().collect();
    let (mean, std) = if ok.is_empty() {
        (None, None)
    } else {
        let m = ok.iter().sum::<f64>() / ok.len() as f64;
        let v = ok.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / ok.len() as f64;
        (Some(m), Some(v.sqrt()))
    };
    SummaryRow { variant: variant.to_string(), runs: values.len(), failed: values.len() - ok.len(), mean, std, values }
}

/// Columns `variant,runs,failed,meanFinalReward,stdFinalReward,finalRewards`;
/// the last joins per-seed values with `;` and writes `failed` for failed runs.
pub fn write_summary_csv(w: impl Write, rows: &[SummaryRow]) -> Result<()> {
    let err = |e: csv::Error| TorError::Io(std::io::Error::other(e));
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["variant", "runs", "failed", "meanFinalReward", "stdFinalReward", "finalRewards"]).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let values: Vec<String> =
            r.values.iter().map(|v| v.map_or_else(|| "failed".to_string(), |x| x.to_string())).collect();
        wr.write_record([
            r.variant.clone(),
            r.runs.to_string(),
            r.failed.to_string(),
            opt(r.mean),
            opt(r.std),
            values.join(";"),
        ])
        .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Outcome of [`gradient_check`] for one objective.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub algorithm: Algorithm,
    pub num_parameters: usize,
    pub report: FdReport,
}

/// Policy used by the gradient check: two blocks, two heads, `d = 4`.
pub fn gradcheck_policy() -> PolicyConfig {
    PolicyConfig { d_model: 4, num_layers: 2, num_heads: 2, ffn_hidden: 8, max_len: 6, ..PolicyConfig::default() }
}

/// Central-difference check of `d objective / d theta` on a tiny policy.
/// Behavior and reference policies are perturbed copies of `theta` so
/// ratios spread across the clip band and the KL term is nonzero; rewards
/// are drawn at random so every group has signal.
pub fn gradient_check(cfg: &TrainConfig, algorithm: Algorithm, h: f64, tolerance: f64, corrupt: Option<f64>) -> Result<GradCheck> {
    let mut cfg = cfg.clone();
    cfg.algorithm = algorithm;
    cfg.policy = gradcheck_policy();
    cfg.selection.alpha_r = 0.5;
    cfg.selection.alpha_p = 0.5;
    let seed = cfg.trainer.rng_seed;
    let arch = cfg.architecture();
    let theta = PolicyParams::init(arch.clone(), derive_seed(seed, STREAM_INIT, 1));
    let perturbed = |k: u64, scale: f64| {
        let noise = PolicyParams::init(arch.clone(), derive_seed(seed, STREAM_INIT, k));
        let mut p = theta.clone();
        for (name, t) in p.tensors_mut().iter_mut() {
            for (w, n) in t.values_mut().iter_mut().zip(noise.get(name).values()) {
                *w += scale * n;
            }
        }
        p
    };
    let old = perturbed(2, 0.15);
    let reference = perturbed(3, 0.15);
    let (b, g) = (2usize, 3usize);
    let samples: Vec<_> = (0..b as u64).map(|k| generate_sample(derive_seed(seed, STREAM_TASK, k), &cfg.task)).collect();
    let batch = old.sample_rollouts(&samples, g, 1.0, cfg.policy.max_len, derive_seed(seed, STREAM_ROLLOUT, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ROLLOUT, 1));
    let mut rewards = Vec::with_capacity(b * g);
    for _ in 0..b {
        let mut group: Vec<f64> = (0..g).map(|_| f64::from(rng.random::<bool>())).collect();
        group[0] = 1.0;
        group[1] = 0.0;
        rewards.extend(group);
    }
    let advantages = batch_advantages(&batch, &rewards, &cfg.objective)?;
    let table = build_score_table(&batch, &old, ScoreOptions::new(cfg.policy.top_p))?;
    let reasoning = select_tokens(&table, ScoreField::Entropy, cfg.selection.alpha_r)?;
    let perception = select_tokens(&table, ScoreField::Sensitivity, cfg.selection.alpha_p)?;
    let mask = if algorithm.is_tor() {
        Some(build_weight_mask(&reasoning, &perception, &cfg.selection, &batch)?)
    } else {
        None
    };
    let logp_ref = (algorithm.surrogate(&cfg.objective).beta > 0.0)
        .then(|| reference.score_batch(&batch, Condition::Image).map(|v| v.concat()))
        .transpose()?;
    let n = batch.records.len();
    let c = Collected {
        batch,
        rewards,
        advantages,
        mean_reward: 0.5,
        table,
        reasoning,
        perception,
        mask,
        logp_ref,
    };
    let (mut graph, _, _, _) = minibatch_graph(&theta, &c, 0..n, &cfg)?;
    if let Some(f) = corrupt {
        graph.corrupt_adjoints(f);
    }
    let report = finite_difference_check(&mut graph, theta.tensors(), h, tolerance)?;
    Ok(GradCheck { algorithm, num_parameters: theta.num_parameters(), report })
}
