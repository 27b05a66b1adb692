//! Per-token reasoning and perception scores.
//!
//! Reasoning score: top-p entropy of the sampling-time distribution.
//! Perception score: absolute change of the token log-probability when the
//! image is swapped for the all-PAD placeholder. Three alternative perception
//! proxies are available for analysis.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result, TorError};
use crate::policy::{Condition, PolicyParams, RolloutBatch};
use crate::synthtask::PlaceholderImage;

/// Indices of the smallest probability-sorted prefix whose cumulative mass
/// reaches `p` (the crossing token is included). Ties keep vocabulary order.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut keep = 0;
    for &v in &order {
        acc += probs[v];
        keep += 1;
        if acc >= p {
            break;
        }
    }
    order.truncate(keep);
    order
}

fn plogp(q: f64) -> f64 {
    if q > 0.0 {
        q * q.ln()
    } else {
        0.0
    }
}

/// `-sum p log p` over an already computed nucleus, without renormalizing.
pub fn top_p_entropy_of_sorted(probs: &[f64], nucleus: &[usize]) -> f64 {
    let h = -nucleus.iter().map(|&v| plogp(probs[v])).sum::<f64>();
    // -0.0 for one-hot rows
    h.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Sum over the nucleus with the original probabilities.
    #[default]
    Literal,
    /// Renormalize the nucleus to a distribution first.
    Renormalized,
}

fn check_distribution(probs: &[f64], p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(usage(format!("top-p mass {p} outside (0, 1]")));
    }
    if probs.is_empty() {
        return Err(usage("empty distribution"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 || probs.iter().any(|&q| !(q >= 0.0)) {
        return Err(usage(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(())
}

/// Top-p entropy, natural log.
pub fn token_entropy(probs: &[f64], p: f64) -> Result<f64> {
    token_entropy_with(probs, p, EntropyMode::Literal)
}

pub fn token_entropy_with(probs: &[f64], p: f64, mode: EntropyMode) -> Result<f64> {
    check_distribution(probs, p)?;
    let core = nucleus(probs, p);
    Ok(match mode {
        EntropyMode::Literal => top_p_entropy_of_sorted(probs, &core),
        EntropyMode::Renormalized => {
            let z: f64 = core.iter().map(|&v| probs[v]).sum();
            (-core.iter().map(|&v| plogp(probs[v] / z)).sum::<f64>()).max(0.0)
        }
    })
}

/// Full Shannon entropy.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    (-probs.iter().map(|&q| plogp(q)).sum::<f64>()).max(0.0)
}

/// `|log p_with - log p_without|`.
pub fn visual_sensitivity(logp_with: f64, logp_without: f64) -> f64 {
    (logp_with - logp_without).abs()
}

/// Which alternative perception proxies to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProxySet {
    pub prob_diff: bool,
    pub entropy_diff: bool,
    pub attention_mass: bool,
}

impl ProxySet {
    pub fn all() -> Self {
        Self { prob_diff: true, entropy_diff: true, attention_mass: true }
    }

    pub fn none() -> Self {
        Self::default()
    }

    fn any(&self) -> bool {
        self.prob_diff || self.entropy_diff || self.attention_mass
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub top_p: f64,
    pub entropy_mode: EntropyMode,
    pub proxies: ProxySet,
}

impl ScoreOptions {
    pub fn new(top_p: f64) -> Self {
        Self { top_p, entropy_mode: EntropyMode::Literal, proxies: ProxySet::none() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScoreField {
    Entropy,
    Sensitivity,
    ProbDiff,
    EntropyDiff,
    AttentionMass,
}

impl ScoreField {
    pub fn name(self) -> &'static str {
        match self {
            ScoreField::Entropy => "entropy",
            ScoreField::Sensitivity => "sensitivity",
            ScoreField::ProbDiff => "probDiff",
            ScoreField::EntropyDiff => "entropyDiff",
            ScoreField::AttentionMass => "attentionMass",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub b: usize,
    pub i: usize,
    pub t: usize,
    pub token: usize,
    pub entropy: f64,
    pub sensitivity: f64,
    pub prob_diff: Option<f64>,
    pub entropy_diff: Option<f64>,
    pub attention_mass: Option<f64>,
    /// Attention mass on image cells per layer (analysis only).
    pub attention_per_layer: Option<Vec<f64>>,
}

/// One row per generated token, ordered by `(b, i, t)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl TokenScoreTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Column of `field`; `None` if the proxy was not computed.
    pub fn column(&self, field: ScoreField) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| match field {
                ScoreField::Entropy => Some(r.entropy),
                ScoreField::Sensitivity => Some(r.sensitivity),
                ScoreField::ProbDiff => r.prob_diff,
                ScoreField::EntropyDiff => r.entropy_diff,
                ScoreField::AttentionMass => r.attention_mass,
            })
            .collect()
    }

    /// Header `b,i,t,token,entropy,sensitivity,probDiff,entropyDiff,attentionMass`;
    /// absent proxies are empty cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| TorError::Io(std::io::Error::other(e));
        wr.write_record(["b", "i", "t", "token", "entropy", "sensitivity", "probDiff", "entropyDiff", "attentionMass"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            wr.write_record([
                r.b.to_string(),
                r.i.to_string(),
                r.t.to_string(),
                r.token.to_string(),
                r.entropy.to_string(),
                r.sensitivity.to_string(),
                opt(r.prob_diff),
                opt(r.entropy_diff),
                opt(r.attention_mass),
            ])
            .map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Scores every token of `batch`. Entropies come from sampling time unless a
/// different nucleus mass or entropy mode is requested, in which case they
/// are recomputed from the (identical) behavior-policy distributions.
pub fn build_score_table(batch: &RolloutBatch, params: &PolicyParams, opts: ScoreOptions) -> Result<TokenScoreTable> {
    if let Some(v) = batch.behavior_version() {
        if v != params.version_tag {
            return Err(TorError::Stale { batch: v, params: params.version_tag });
        }
    }
    let recorded_entropy = opts.entropy_mode == EntropyMode::Literal && opts.top_p == batch.top_p;
    let need_full = opts.proxies.any() || !recorded_entropy;
    let mut rows = Vec::with_capacity(batch.total_tokens());
    let placeholder_scores = if need_full { Vec::new() } else { params.score_batch(batch, Condition::Placeholder)? };
    for (r, rec) in batch.records.iter().enumerate() {
        let sample = &batch.samples[rec.sample_index];
        if !need_full {
            let without = &placeholder_scores[r];
            for t in 0..rec.len() {
                rows.push(ScoreRow {
                    b: rec.sample_index,
                    i: rec.group_index,
                    t,
                    token: rec.tokens[t],
                    entropy: rec.entropy[t],
                    sensitivity: visual_sensitivity(rec.logp_with_image[t], without[t]),
                    prob_diff: None,
                    entropy_diff: None,
                    attention_mass: None,
                    attention_per_layer: None,
                });
            }
            continue;
        }
        let placeholder = PlaceholderImage::new(&crate::synthtask::TaskConfig {
            grid_height: params.arch().grid_height,
            grid_width: params.arch().grid_width,
            alphabet_size: params.arch().alphabet_size,
            ..Default::default()
        });
        let with = params.teacher_force(&sample.cells(), &sample.question, &rec.tokens)?;
        let without = params.teacher_force(placeholder.cells(), &sample.question, &rec.tokens)?;
        for (t, (w, wo)) in with.iter().zip(&without).enumerate() {
            let entropy = if recorded_entropy {
                rec.entropy[t]
            } else {
                token_entropy_with(&w.probs, opts.top_p, opts.entropy_mode)?
            };
            let layers = w.image_attention.clone();
            rows.push(ScoreRow {
                b: rec.sample_index,
                i: rec.group_index,
                t,
                token: rec.tokens[t],
                entropy,
                sensitivity: visual_sensitivity(w.log_prob, wo.log_prob),
                prob_diff: opts.proxies.prob_diff.then(|| (w.probs[w.token] - wo.probs[wo.token]).abs()),
                entropy_diff: opts
                    .proxies
                    .entropy_diff
                    .then(|| (shannon_entropy(&w.probs) - shannon_entropy(&wo.probs)).abs()),
                attention_mass: opts
                    .proxies
                    .attention_mass
                    .then(|| layers.iter().sum::<f64>() / layers.len() as f64),
                attention_per_layer: opts.proxies.attention_mass.then_some(layers),
            });
        }
    }
    Ok(TokenScoreTable { rows })
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; errors when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(usage(format!("correlation needs two equal-length lists of at least 2 ({} vs {})", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(TorError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(usage(format!("rank correlation needs equal lengths >= 2 ({} vs {})", a.len(), b.len())));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .map_err(|_| TorError::UndefinedCorrelation("a list has zero rank variance".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(token_entropy(&[0.0, 1.0, 0.0], 0.5).unwrap(), 0.0);
        assert!((token_entropy(&[0.5, 0.5], 0.95).unwrap() - 2f64.ln()).abs() < 1e-15);
        let h = token_entropy(&[0.9, 0.1], 0.95).unwrap();
        assert!((h - 0.325082973391448).abs() < 1e-12, "{h}");
        // a nucleus of one token at p = 0.9 keeps only 0.9 ln 0.9
        let h = token_entropy(&[0.9, 0.1], 0.9).unwrap();
        assert!((h + 0.9 * 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_rejects_bad_p() {
        assert!(token_entropy(&[1.0], 0.0).is_err());
        assert!(token_entropy(&[1.0], 1.5).is_err());
        assert!(token_entropy(&[0.5, 0.4], 0.9).is_err());
    }

    #[test]
    fn renormalized_variant() {
        let h = token_entropy_with(&[0.6, 0.3, 0.1], 0.8, EntropyMode::Renormalized).unwrap();
        let expected = -((2.0f64 / 3.0) * (2.0f64 / 3.0).ln() + (1.0 / 3.0) * (1.0f64 / 3.0).ln());
        assert!((h - expected).abs() < 1e-14);
    }

    #[test]
    fn nucleus_includes_crossing_token() {
        assert_eq!(nucleus(&[0.1, 0.6, 0.3], 0.6), vec![1]);
        assert_eq!(nucleus(&[0.1, 0.6, 0.3], 0.61), vec![1, 2]);
        assert_eq!(nucleus(&[0.25; 4], 0.5), vec![0, 1]);
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(visual_sensitivity(-1.0, -1.0), 0.0);
        assert_eq!(visual_sensitivity(-1.0, -3.0), 2.0);
        assert_eq!(visual_sensitivity(-3.0, -1.0), 2.0);
    }

    #[test]
    fn rank_correlation_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((rank_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((rank_correlation(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((rank_correlation(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(rank_correlation(&a, &[1.0; 4]), Err(TorError::UndefinedCorrelation(_))));
        assert!(matches!(rank_correlation(&a, &[1.0]), Err(TorError::Usage(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
