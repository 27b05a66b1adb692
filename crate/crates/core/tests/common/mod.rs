//! Builders for synthetic batches and score tables.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tor_core::objectives::ObjectiveInputs;
use tor_core::policy::{RolloutBatch, RolloutRecord};
use tor_core::scoring::{ScoreRow, TokenScoreTable};
use tor_core::synthtask::{generate_sample, TaskConfig};

/// `b` samples with `g` rollouts each, lengths in `1..=max_len`, random
/// log-probs and entropies.
pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, g: usize, max_len: usize) -> RolloutBatch {
    let task = TaskConfig::default();
    let samples = (0..b).map(|k| generate_sample(rng.random::<u64>() ^ k as u64, &task)).collect();
    let mut records = Vec::new();
    for sample_index in 0..b {
        for group_index in 0..g {
            let len = rng.random_range(1..=max_len);
            records.push(RolloutRecord {
                sample_index,
                group_index,
                tokens: (0..len).map(|_| rng.random_range(0..16)).collect(),
                logp_with_image: (0..len).map(|_| -rng.random_range(0.0..3.0)).collect(),
                entropy: (0..len).map(|_| rng.random_range(0.0..2.0)).collect(),
                logp_placeholder: Some((0..len).map(|_| -rng.random_range(0.0..3.0)).collect()),
                behavior_version: 0,
            });
        }
    }
    RolloutBatch { samples, group_size: g, top_p: 0.95, records }
}

/// Score table over `batch` with entropy from the records and
/// sensitivity from the two log-prob conditions.
pub fn table_for(batch: &RolloutBatch) -> TokenScoreTable {
    let mut rows = Vec::new();
    for rec in &batch.records {
        let without = rec.logp_placeholder.as_ref().expect("placeholder scores");
        for t in 0..rec.len() {
            rows.push(ScoreRow {
                b: rec.sample_index,
                i: rec.group_index,
                t,
                token: rec.tokens[t],
                entropy: rec.entropy[t],
                sensitivity: (rec.logp_with_image[t] - without[t]).abs(),
                prob_diff: None,
                entropy_diff: None,
                attention_mass: None,
                attention_per_layer: None,
            });
        }
    }
    TokenScoreTable { rows }
}

/// A single-rollout table holding `entropy` and `sensitivity` columns.
pub fn flat_table(entropy: &[f64], sensitivity: &[f64]) -> TokenScoreTable {
    TokenScoreTable {
        rows: entropy
            .iter()
            .zip(sensitivity)
            .enumerate()
            .map(|(t, (&e, &s))| ScoreRow {
                b: 0,
                i: 0,
                t,
                token: 0,
                entropy: e,
                sensitivity: s,
                prob_diff: None,
                entropy_diff: None,
                attention_mass: None,
                attention_per_layer: None,
            })
            .collect(),
    }
}

/// Objective inputs for `batch` with random advantages, new log-probs near
/// the old ones and a reference policy.
pub fn random_inputs(rng: &mut ChaCha8Rng, batch: &RolloutBatch) -> (ObjectiveInputs, Vec<f64>) {
    let advantages = (0..batch.records.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut inputs = ObjectiveInputs::from_batch(batch, advantages, None);
    let n = inputs.total_tokens();
    inputs.logp_ref = Some((0..n).map(|_| -rng.random_range(0.0..3.0)).collect());
    let logp_new = inputs.logp_old.iter().map(|&o| (o + rng.random_range(-0.4..0.4)).min(0.0)).collect();
    (inputs, logp_new)
}

/// Relative difference guarded at zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
