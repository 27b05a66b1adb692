//! Batch-level percentile selection and the per-token weight mask.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result, TorError};
use crate::policy::RolloutBatch;
use crate::scoring::{EntropyMode, ScoreField, TokenScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenIndex {
    pub b: usize,
    pub i: usize,
    pub t: usize,
}

pub type TokenSet = BTreeSet<TokenIndex>;

/// How a token in both sets is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapRule {
    /// Overlapping tokens take the reasoning weight.
    #[default]
    Reasoning,
    /// Overlapping tokens take `gammaR + gammaP`.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub alpha_r: f64,
    pub alpha_p: f64,
    pub gamma_r: f64,
    pub gamma_p: f64,
    pub overlap_rule: OverlapRule,
    pub entropy_mode: EntropyMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha_r: 0.3,
            alpha_p: 0.3,
            gamma_r: 1.0,
            gamma_p: 0.5,
            overlap_rule: OverlapRule::Reasoning,
            entropy_mode: EntropyMode::Literal,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("selection.alphaR", self.alpha_r), ("selection.alphaP", self.alpha_p)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(TorError::Config(format!("{name} = {a} outside (0, 1]")));
            }
        }
        for (name, g) in [("selection.gammaR", self.gamma_r), ("selection.gammaP", self.gamma_p)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(TorError::Config(format!("{name} = {g} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// Number of selected scores before ties: `floor(alpha * n)`, guarded
/// against representation error in `alpha * n`.
fn selected_count(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64) + 1e-9).floor() as usize
}

/// The `(1 - alpha)` quantile: ascending sort, 0-based index
/// `n - floor(alpha n)`, clamped into the list. Selecting `>= threshold`
/// yields `floor(alpha n)` scores plus any ties at the threshold.
pub fn percentile_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(usage("percentile of an empty list"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(usage(format!("selection fraction {alpha} outside (0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = n.saturating_sub(selected_count(alpha, n)).min(n - 1);
    Ok(sorted[idx])
}

/// `{(b, i, t) : score >= percentile_threshold}` over the whole table.
pub fn select_tokens(table: &TokenScoreTable, field: ScoreField, alpha: f64) -> Result<TokenSet> {
    let scores = table
        .column(field)
        .ok_or_else(|| usage(format!("score table has no `{}` column", field.name())))?;
    let threshold = percentile_threshold(&scores, alpha)?;
    Ok(table
        .rows
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= threshold)
        .map(|(r, _)| TokenIndex { b: r.b, i: r.i, t: r.t })
        .collect())
}

/// Per-token weights aligned with `batch.records`, flattened record-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

impl WeightMask {
    pub fn all_ones(batch: &RolloutBatch) -> Self {
        let offsets = offsets(batch);
        Self { weights: vec![1.0; batch.total_tokens()], offsets }
    }

    pub fn from_weights(batch: &RolloutBatch, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != batch.total_tokens() {
            return Err(usage(format!("{} weights for {} tokens", weights.len(), batch.total_tokens())));
        }
        Ok(Self { weights, offsets: offsets(batch) })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights of record `r`.
    pub fn record(&self, r: usize) -> &[f64] {
        &self.weights[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn num_records(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Fraction of tokens with nonzero weight.
    pub fn support_fraction(&self) -> f64 {
        if self.weights.is_empty() {
            return 0.0;
        }
        self.weights.iter().filter(|&&w| w != 0.0).count() as f64 / self.weights.len() as f64
    }
}

fn offsets(batch: &RolloutBatch) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch.records.len() + 1);
    let mut acc = 0;
    out.push(0);
    for r in &batch.records {
        acc += r.len();
        out.push(acc);
    }
    out
}

/// Index of the record holding `(b, i)`.
fn record_of(batch: &RolloutBatch, idx: &TokenIndex) -> Result<usize> {
    let g = batch.group_size;
    let r = idx.b * g + idx.i;
    if idx.i >= g || r >= batch.records.len() || idx.t >= batch.records[r].len() {
        return Err(usage(format!("token index {idx:?} outside the batch")));
    }
    Ok(r)
}

/// Weight `gammaR` on reasoning tokens (including the overlap under the
/// default rule), `gammaP` on perception-only tokens, zero elsewhere.
pub fn build_weight_mask(
    reasoning: &TokenSet,
    perception: &TokenSet,
    config: &SelectionConfig,
    batch: &RolloutBatch,
) -> Result<WeightMask> {
    let offsets = offsets(batch);
    let mut weights = vec![0.0; batch.total_tokens()];
    for idx in perception {
        let r = record_of(batch, idx)?;
        weights[offsets[r] + idx.t] = config.gamma_p;
    }
    for idx in reasoning {
        let r = record_of(batch, idx)?;
        let w = &mut weights[offsets[r] + idx.t];
        *w = match config.overlap_rule {
            OverlapRule::Additive if perception.contains(idx) => config.gamma_r + config.gamma_p,
            _ => config.gamma_r,
        };
    }
    Ok(WeightMask { weights, offsets })
}

/// Rows `(b, i, t, field, score)` for every selected token.
pub fn write_selection_csv(
    w: impl Write,
    table: &TokenScoreTable,
    sets: &[(ScoreField, &TokenSet)],
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| TorError::Io(std::io::Error::other(e));
    wr.write_record(["b", "i", "t", "field", "score"]).map_err(io)?;
    for (field, set) in sets {
        let column = table
            .column(*field)
            .ok_or_else(|| usage(format!("score table has no `{}` column", field.name())))?;
        for (row, score) in table.rows.iter().zip(column) {
            if set.contains(&TokenIndex { b: row.b, i: row.i, t: row.t }) {
                wr.write_record([
                    row.b.to_string(),
                    row.i.to_string(),
                    row.t.to_string(),
                    field.name().to_string(),
                    score.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}
