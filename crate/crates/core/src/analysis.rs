//! Diagnostic reports over scored batches: score distributions, the
//! entropy/sensitivity scatter, overlap traces, per-rollout token mixtures
//! and the perception-proxy correlation matrix.
//!
//! Every report is a pure function of its inputs and has a CSV writer.
//! Missing values are written as empty cells.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{usage, Result, TorError};
use crate::objectives::compute_rewards;
use crate::policy::{PolicyParams, RolloutBatch};
use crate::scoring::{build_score_table, pearson, rank_correlation, ProxySet, ScoreField, ScoreOptions, TokenScoreTable};
use crate::selection::{percentile_threshold, select_tokens, TokenIndex, TokenSet};
use crate::synthtask::Vocab;
use crate::trainer::{batch_samples, derive_seed, TrainConfig, STREAM_ANALYSIS};

pub const REPORT_FRACTIONS: [f64; 3] = [0.2, 0.3, 0.5];
pub const HISTOGRAM_BINS: usize = 50;

fn csv_err(e: csv::Error) -> TorError {
    TorError::Io(std::io::Error::other(e))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DistributionReport {
    pub field: ScoreField,
    pub count: usize,
    pub mean: f64,
    /// `(fraction, threshold)` for each of [`REPORT_FRACTIONS`].
    pub thresholds: Vec<(f64, f64)>,
    /// `HISTOGRAM_BINS + 1` edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Thresholds use the selection percentile; the histogram spans
/// `[min, max]` with the last bin closed.
pub fn distribution_report(table: &TokenScoreTable, field: ScoreField) -> Result<DistributionReport> {
    let scores = table
        .column(field)
        .ok_or_else(|| usage(format!("score table has no `{}` column", field.name())))?;
    if scores.is_empty() {
        return Err(usage("distribution of an empty score table"));
    }
    let thresholds = REPORT_FRACTIONS
        .iter()
        .map(|&f| percentile_threshold(&scores, f).map(|t| (f, t)))
        .collect::<Result<Vec<_>>>()?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let bin_edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &s in &scores {
        let k = if width > 0.0 { (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
        counts[k] += 1;
    }
    Ok(DistributionReport {
        field,
        count: scores.len(),
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        thresholds,
        bin_edges,
        counts,
    })
}

/// Columns `field,kind,fraction,binLow,binHigh,value`; `kind` is
/// `summary`, `threshold` or `bin`.
pub fn write_distribution_csv(w: impl Write, report: &DistributionReport) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let name = report.field.name();
    wr.write_record(["field", "kind", "fraction", "binLow", "binHigh", "value"]).map_err(csv_err)?;
    wr.write_record([name, "count", "", "", "", &report.count.to_string()]).map_err(csv_err)?;
    wr.write_record([name, "mean", "", "", "", &report.mean.to_string()]).map_err(csv_err)?;
    for (f, t) in &report.thresholds {
        wr.write_record([name, "threshold", &f.to_string(), "", "", &t.to_string()]).map_err(csv_err)?;
    }
    for (k, c) in report.counts.iter().enumerate() {
        let (lo, hi) = (report.bin_edges[k].to_string(), report.bin_edges[k + 1].to_string());
        wr.write_record([name, "bin", "", &lo, &hi, &c.to_string()]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-rollout coordinates of the entropy/sensitivity scatter.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScatterPoint {
    pub b: usize,
    pub i: usize,
    /// Over the rollout's reasoning tokens.
    pub mean_entropy: Option<f64>,
    pub max_entropy: Option<f64>,
    /// Over the rollout's perception tokens.
    pub mean_sensitivity: Option<f64>,
    pub max_sensitivity: Option<f64>,
}

fn mean_max(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    (Some(xs.iter().sum::<f64>() / xs.len() as f64), Some(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

/// One point per rollout, in record order.
pub fn interdependence_scatter(
    batch: &RolloutBatch,
    table: &TokenScoreTable,
    reasoning: &TokenSet,
    perception: &TokenSet,
) -> Vec<ScatterPoint> {
    let mut ent: Vec<Vec<f64>> = vec![Vec::new(); batch.records.len()];
    let mut sen: Vec<Vec<f64>> = vec![Vec::new(); batch.records.len()];
    for row in &table.rows {
        let idx = TokenIndex { b: row.b, i: row.i, t: row.t };
        let r = row.b * batch.group_size + row.i;
        if r >= ent.len() {
            continue;
        }
        if reasoning.contains(&idx) {
            ent[r].push(row.entropy);
        }
        if perception.contains(&idx) {
            sen[r].push(row.sensitivity);
        }
    }
    batch
        .records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            let (mean_entropy, max_entropy) = mean_max(&ent[r]);
            let (mean_sensitivity, max_sensitivity) = mean_max(&sen[r]);
            ScatterPoint { b: rec.sample_index, i: rec.group_index, mean_entropy, max_entropy, mean_sensitivity, max_sensitivity }
        })
        .collect()
}

/// Pearson correlation of the mean coordinates over points where both exist.
pub fn scatter_correlation(points: &[ScatterPoint]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        points.iter().filter_map(|p| Some((p.mean_entropy?, p.mean_sensitivity?))).unzip();
    pearson(&xs, &ys).ok()
}

pub fn write_scatter_csv(w: impl Write, points: &[ScatterPoint]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["b", "i", "meanEntropy", "meanSensitivity", "maxEntropy", "maxSensitivity"])
        .map_err(csv_err)?;
    for p in points {
        wr.write_record([
            p.b.to_string(),
            p.i.to_string(),
            cell(p.mean_entropy),
            cell(p.mean_sensitivity),
            cell(p.max_entropy),
            cell(p.max_sensitivity),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct OverlapPoint {
    pub batch: usize,
    pub intersection: usize,
    pub union: usize,
    /// `|Tr n Tp| / |Tr u Tp|`.
    pub ratio: f64,
    /// `|Tr n Tp|` over all scored tokens of the batch.
    pub ratio_of_total: f64,
}

pub fn overlap_ratio(reasoning: &TokenSet, perception: &TokenSet) -> f64 {
    let inter = reasoning.intersection(perception).count();
    let union = reasoning.len() + perception.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `history[k] = (Tr, Tp)` and `totals[k]` = scored tokens of batch `k`.
pub fn overlap_trace(history: &[(TokenSet, TokenSet)], totals: &[usize]) -> Result<Vec<OverlapPoint>> {
    if history.len() != totals.len() {
        return Err(usage(format!("{} selections for {} token totals", history.len(), totals.len())));
    }
    Ok(history
        .iter()
        .zip(totals)
        .enumerate()
        .map(|(batch, ((tr, tp), &total))| {
            let intersection = tr.intersection(tp).count();
            let union = tr.len() + tp.len() - intersection;
            OverlapPoint {
                batch,
                intersection,
                union,
                ratio: overlap_ratio(tr, tp),
                ratio_of_total: if total == 0 { 0.0 } else { intersection as f64 / total as f64 },
            }
        })
        .collect())
}

pub fn write_overlap_csv(w: impl Write, points: &[OverlapPoint]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["batch", "intersection", "union", "overlapRatio", "overlapOfTotal"]).map_err(csv_err)?;
    for p in points {
        wr.write_record([
            p.batch.to_string(),
            p.intersection.to_string(),
            p.union.to_string(),
            p.ratio.to_string(),
            p.ratio_of_total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MixtureRow {
    pub b: usize,
    pub i: usize,
    pub length: usize,
    pub reasoning_selected: usize,
    pub perception_selected: usize,
    pub reasoning_fraction: f64,
    pub perception_fraction: f64,
    pub reward: f64,
}

/// Per-rollout selected fractions, grouped by sample (record order).
pub fn mixture_report(
    batch: &RolloutBatch,
    reasoning: &TokenSet,
    perception: &TokenSet,
    rewards: &[f64],
) -> Result<Vec<MixtureRow>> {
    if rewards.len() != batch.records.len() {
        return Err(usage(format!("{} rewards for {} rollouts", rewards.len(), batch.records.len())));
    }
    Ok(batch
        .records
        .iter()
        .zip(rewards)
        .map(|(rec, &reward)| {
            let count = |set: &TokenSet| {
                (0..rec.len())
                    .filter(|&t| set.contains(&TokenIndex { b: rec.sample_index, i: rec.group_index, t }))
                    .count()
            };
            let (nr, np) = (count(reasoning), count(perception));
            let len = rec.len().max(1) as f64;
            MixtureRow {
                b: rec.sample_index,
                i: rec.group_index,
                length: rec.len(),
                reasoning_selected: nr,
                perception_selected: np,
                reasoning_fraction: nr as f64 / len,
                perception_fraction: np as f64 / len,
                reward,
            }
        })
        .collect())
}

pub fn write_mixture_csv(w: impl Write, rows: &[MixtureRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "b",
        "i",
        "length",
        "reasoningSelected",
        "perceptionSelected",
        "reasoningSelectedFraction",
        "perceptionSelectedFraction",
        "reward",
    ])
    .map_err(csv_err)?;
    for r in rows {
        wr.write_record([
            r.b.to_string(),
            r.i.to_string(),
            r.length.to_string(),
            r.reasoning_selected.to_string(),
            r.perception_selected.to_string(),
            r.reasoning_fraction.to_string(),
            r.perception_fraction.to_string(),
            r.reward.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub const PROXY_FIELDS: [ScoreField; 4] =
    [ScoreField::Sensitivity, ScoreField::ProbDiff, ScoreField::EntropyDiff, ScoreField::AttentionMass];

/// Spearman matrix over [`PROXY_FIELDS`]; `None` marks undefined entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ProxyMatrix {
    pub fields: Vec<ScoreField>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Spearman of each proxy against each layer's image attention.
    pub per_layer: Vec<(ScoreField, Vec<Option<f64>>)>,
}

impl ProxyMatrix {
    pub fn get(&self, a: ScoreField, b: ScoreField) -> Option<f64> {
        let i = self.fields.iter().position(|&f| f == a)?;
        let j = self.fields.iter().position(|&f| f == b)?;
        self.values[i][j]
    }
}

fn constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

pub fn proxy_comparison(table: &TokenScoreTable) -> Result<ProxyMatrix> {
    let cols = PROXY_FIELDS
        .iter()
        .map(|&f| table.column(f).ok_or_else(|| usage(format!("score table has no `{}` column", f.name()))))
        .collect::<Result<Vec<_>>>()?;
    if table.is_empty() {
        return Err(usage("proxy comparison of an empty score table"));
    }
    let n = PROXY_FIELDS.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        if constant(&cols[i]) {
            continue;
        }
        values[i][i] = Some(1.0);
        for j in (i + 1)..n {
            if constant(&cols[j]) {
                continue;
            }
            let rho = rank_correlation(&cols[i], &cols[j]).ok();
            values[i][j] = rho;
            values[j][i] = rho;
        }
    }
    let layers = table.rows[0].attention_per_layer.as_ref().map_or(0, Vec::len);
    let per_layer = PROXY_FIELDS
        .iter()
        .zip(&cols)
        .map(|(&f, col)| {
            let rhos = (0..layers)
                .map(|l| {
                    let att: Vec<f64> = table
                        .rows
                        .iter()
                        .map(|r| r.attention_per_layer.as_ref().map_or(f64::NAN, |a| a[l]))
                        .collect();
                    rank_correlation(col, &att).ok()
                })
                .collect();
            (f, rhos)
        })
        .collect();
    Ok(ProxyMatrix { fields: PROXY_FIELDS.to_vec(), values, per_layer })
}

/// Square matrix with a leading `proxy` column, followed by one
/// `attentionLayerK` column per layer holding that proxy's Spearman against
/// layer `K`'s image attention.
pub fn write_proxy_csv(w: impl Write, m: &ProxyMatrix) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let layers = m.per_layer.first().map_or(0, |(_, r)| r.len());
    let mut header = vec!["proxy".to_string()];
    header.extend(m.fields.iter().map(|f| f.name().to_string()));
    header.extend((0..layers).map(|l| format!("attentionLayer{l}")));
    wr.write_record(&header).map_err(csv_err)?;
    for (k, (f, row)) in m.fields.iter().zip(&m.values).enumerate() {
        let mut rec = vec![f.name().to_string()];
        rec.extend(row.iter().map(|&v| cell(v)));
        let per = m.per_layer.get(k).map(|(_, r)| r.as_slice()).unwrap_or(&[]);
        rec.extend((0..layers).map(|l| cell(per.get(l).copied().flatten())));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Every report for one freshly sampled batch.
#[derive(Debug, Clone)]
pub struct AnalysisRun {
    pub batch_index: u64,
    pub batch: RolloutBatch,
    pub rewards: Vec<f64>,
    pub table: TokenScoreTable,
    pub reasoning: TokenSet,
    pub perception: TokenSet,
    pub entropy: DistributionReport,
    pub sensitivity: DistributionReport,
    pub scatter: Vec<ScatterPoint>,
    pub overlap: Vec<OverlapPoint>,
    pub mixture: Vec<MixtureRow>,
    pub proxies: ProxyMatrix,
}

/// Samples batch `batch_index` of the task stream under `params`, scores it
/// with every proxy and selects with `cfg.selection`. Deterministic in
/// `(params, cfg, batch_index)`.
pub fn analyze(params: &PolicyParams, cfg: &TrainConfig, batch_index: u64) -> Result<AnalysisRun> {
    let t = &cfg.trainer;
    let samples = batch_samples(cfg, batch_index);
    let seed = derive_seed(t.rng_seed, STREAM_ANALYSIS, batch_index);
    let batch = params.sample_rollouts(&samples, t.group_size, cfg.policy.top_p, cfg.policy.max_len, seed)?;
    let rewards = compute_rewards(&batch, &Vocab::for_task(&cfg.task));
    let opts = ScoreOptions {
        entropy_mode: cfg.selection.entropy_mode,
        proxies: ProxySet::all(),
        ..ScoreOptions::new(cfg.policy.top_p)
    };
    let table = build_score_table(&batch, params, opts)?;
    let reasoning = select_tokens(&table, ScoreField::Entropy, cfg.selection.alpha_r)?;
    let perception = select_tokens(&table, ScoreField::Sensitivity, cfg.selection.alpha_p)?;
    let mut overlap = overlap_trace(&[(reasoning.clone(), perception.clone())], &[table.len()])?;
    overlap[0].batch = batch_index as usize;
    Ok(AnalysisRun {
        batch_index,
        entropy: distribution_report(&table, ScoreField::Entropy)?,
        sensitivity: distribution_report(&table, ScoreField::Sensitivity)?,
        scatter: interdependence_scatter(&batch, &table, &reasoning, &perception),
        mixture: mixture_report(&batch, &reasoning, &perception, &rewards)?,
        proxies: proxy_comparison(&table)?,
        overlap,
        batch,
        rewards,
        table,
        reasoning,
        perception,
    })
}

/// Report kinds in the order [`AnalysisRun::write_reports`] emits them.
pub const REPORT_KINDS: [&str; 6] =
    ["entropy-distribution", "sensitivity-distribution", "scatter", "overlap", "mixture", "proxy-matrix"];

impl AnalysisRun {
    /// Writes `<runId>-b<batch>-<kind>.csv` for each of [`REPORT_KINDS`]
    /// into `dir` and returns the paths.
    pub fn write_reports(&self, dir: &Path, run_id: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(REPORT_KINDS.len());
        for kind in REPORT_KINDS {
            let path = dir.join(format!("{run_id}-b{:05}-{kind}.csv", self.batch_index));
            let w = BufWriter::new(File::create(&path)?);
            match kind {
                "entropy-distribution" => write_distribution_csv(w, &self.entropy)?,
                "sensitivity-distribution" => write_distribution_csv(w, &self.sensitivity)?,
                "scatter" => write_scatter_csv(w, &self.scatter)?,
                "overlap" => write_overlap_csv(w, &self.overlap)?,
                "mixture" => write_mixture_csv(w, &self.mixture)?,
                _ => write_proxy_csv(w, &self.proxies)?,
            }
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreRow;

    fn table(entropies: &[f64]) -> TokenScoreTable {
        TokenScoreTable {
            rows: entropies
                .iter()
                .enumerate()
                .map(|(t, &e)| ScoreRow {
                    b: 0,
                    i: 0,
                    t,
                    token: 0,
                    entropy: e,
                    sensitivity: e,
                    prob_diff: None,
                    entropy_diff: None,
                    attention_mass: None,
                    attention_per_layer: None,
                })
                .collect(),
        }
    }

    #[test]
    fn distribution_examples() {
        let r = distribution_report(&table(&[0.7; 9]), ScoreField::Entropy).unwrap();
        assert!(r.thresholds.iter().all(|&(_, t)| t == 0.7));
        assert_eq!(r.counts.iter().sum::<usize>(), 9);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = distribution_report(&table(&hundred), ScoreField::Entropy).unwrap();
        assert_eq!(r.thresholds[2], (0.5, 51.0));
        assert_eq!(r.counts, vec![2; 50]);
        assert!(distribution_report(&table(&[]), ScoreField::Entropy).is_err());
    }

    #[test]
    fn analyze_is_deterministic_and_complete() {
        let mut cfg = TrainConfig::default();
        cfg.trainer.rollout_batch_size = 3;
        cfg.trainer.group_size = 2;
        cfg.policy.max_len = 6;
        let params = PolicyParams::init(cfg.architecture(), 4);
        let a = analyze(&params, &cfg, 2).unwrap();
        let b = analyze(&params, &cfg, 2).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.scatter.len(), 6);
        assert_eq!(a.mixture.len(), 6);
        let m = &a.proxies;
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
            assert!(m.values[i][i].is_none_or(|v| v == 1.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let paths = a.write_reports(dir.path(), "r").unwrap();
        assert_eq!(paths.len(), REPORT_KINDS.len());
        assert!(paths[0].ends_with("r-b00002-entropy-distribution.csv"));
    }

    #[test]
    fn constant_proxy_column_is_undefined() {
        let mut t = table(&[0.1, 0.5, 0.3, 0.9]);
        for (k, r) in t.rows.iter_mut().enumerate() {
            r.prob_diff = Some(k as f64);
            r.entropy_diff = Some(2.0);
            r.attention_mass = Some(-(k as f64));
            r.attention_per_layer = Some(vec![k as f64, 1.0]);
        }
        let m = proxy_comparison(&t).unwrap();
        assert_eq!(m.get(ScoreField::Sensitivity, ScoreField::Sensitivity), Some(1.0));
        assert_eq!(m.get(ScoreField::EntropyDiff, ScoreField::EntropyDiff), None);
        assert_eq!(m.get(ScoreField::EntropyDiff, ScoreField::ProbDiff), None);
        assert!((m.get(ScoreField::ProbDiff, ScoreField::AttentionMass).unwrap() + 1.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_proxy_csv(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("proxy,sensitivity,probDiff,entropyDiff,attentionMass,attentionLayer0,attentionLayer1\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn overlap_examples() {
        let set = |ts: &[usize]| ts.iter().map(|&t| TokenIndex { b: 0, i: 0, t }).collect::<TokenSet>();
        assert_eq!(overlap_ratio(&set(&[0, 1]), &set(&[2])), 0.0);
        assert_eq!(overlap_ratio(&set(&[0, 1]), &set(&[0, 1])), 1.0);
        assert_eq!(overlap_ratio(&set(&[0, 1, 2]), &set(&[2, 3])), 0.25);
        let trace = overlap_trace(&[(set(&[0, 1, 2]), set(&[2, 3]))], &[8]).unwrap();
        assert_eq!(trace[0].ratio_of_total, 0.125);
    }
}
