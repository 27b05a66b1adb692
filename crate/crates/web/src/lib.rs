//! Browser bindings. Every export returns a JSON string so the page can
//! stay plain JavaScript.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tor_core::objectives::clipped_term;
use tor_core::policy::PolicyParams;
use tor_core::scoring::{build_score_table, nucleus, shannon_entropy, token_entropy, ScoreField, ScoreOptions};
use tor_core::selection::{build_weight_mask, select_tokens, SelectionConfig, TokenIndex};
use tor_core::synthtask::generate_sample;
use tor_core::trainer::{format_warmup, TrainConfig};

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EntropyView {
    /// Input weights renormalized.
    probs: Vec<f64>,
    nucleus: Vec<usize>,
    nucleus_mass: f64,
    top_p_entropy: f64,
    shannon_entropy: f64,
}

/// Top-p entropy of a weight vector (normalized first).
#[wasm_bindgen(js_name = topPEntropy)]
pub fn top_p_entropy(weights: Vec<f64>, p: f64) -> Result<String, String> {
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err("weights must be finite and nonnegative".into());
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err("weights sum to zero".into());
    }
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let h = token_entropy(&probs, p).map_err(|e| e.to_string())?;
    let nuc = nucleus(&probs, p);
    let view = EntropyView {
        nucleus_mass: nuc.iter().map(|&v| probs[v]).sum(),
        nucleus: nuc,
        top_p_entropy: h,
        shannon_entropy: shannon_entropy(&probs),
        probs,
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[derive(Serialize)]
struct CurvePoint {
    ratio: f64,
    unclipped: f64,
    clipped: f64,
}

/// `points` samples of `min(r A, clip(r) A)` for `r` in `[0, rMax]`.
#[wasm_bindgen(js_name = surrogateCurve)]
pub fn surrogate_curve(advantage: f64, eps_low: f64, eps_high: f64, r_max: f64, points: usize) -> Result<String, String> {
    if points < 2 || !(r_max > 0.0) || !(0.0..1.0).contains(&eps_low) || !(eps_high >= 0.0) {
        return Err("need points >= 2, rMax > 0, epsLow in [0, 1), epsHigh >= 0".into());
    }
    let curve: Vec<CurvePoint> = (0..points)
        .map(|k| {
            let ratio = r_max * k as f64 / (points - 1) as f64;
            CurvePoint { ratio, unclipped: ratio * advantage, clipped: clipped_term(ratio, advantage, eps_low, eps_high) }
        })
        .collect();
    Ok(serde_json::to_string(&curve).expect("curve serializes"))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TokenView {
    token: String,
    entropy: f64,
    sensitivity: f64,
    reasoning: bool,
    perception: bool,
    weight: f64,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SelectionView {
    question: String,
    grid: Vec<Vec<String>>,
    answer: String,
    rollouts: Vec<Vec<TokenView>>,
    reasoning_count: usize,
    perception_count: usize,
    overlap_count: usize,
}

/// Samples `group` rollouts for one synthetic question from a briefly
/// warmed-up policy, then scores, selects and weights their tokens.
#[wasm_bindgen(js_name = selectTokens)]
pub fn select_batch(
    seed: u64,
    group: usize,
    alpha_r: f64,
    alpha_p: f64,
    gamma_r: f64,
    gamma_p: f64,
) -> Result<String, String> {
    let err = |e: tor_core::TorError| e.to_string();
    let mut cfg = TrainConfig::default();
    cfg.trainer.rng_seed = seed;
    cfg.trainer.warmup_steps = 15;
    cfg.selection = SelectionConfig { alpha_r, alpha_p, gamma_r, gamma_p, ..SelectionConfig::default() };
    cfg.selection.validate().map_err(err)?;
    let mut params = PolicyParams::init(cfg.architecture(), seed);
    format_warmup(&mut params, &cfg).map_err(err)?;
    let sample = generate_sample(seed, &cfg.task);
    let batch = params
        .sample_rollouts(std::slice::from_ref(&sample), group, cfg.policy.top_p, cfg.policy.max_len, seed ^ 0x5eed)
        .map_err(err)?;
    let table = build_score_table(&batch, &params, ScoreOptions::new(cfg.policy.top_p)).map_err(err)?;
    let tr = select_tokens(&table, ScoreField::Entropy, alpha_r).map_err(err)?;
    let tp = select_tokens(&table, ScoreField::Sensitivity, alpha_p).map_err(err)?;
    let mask = build_weight_mask(&tr, &tp, &cfg.selection, &batch).map_err(err)?;
    let vocab = params.vocab();
    let mut rows = table.rows.iter();
    let rollouts = batch
        .records
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            rec.tokens
                .iter()
                .enumerate()
                .map(|(t, &tok)| {
                    let row = rows.next().expect("one row per token");
                    let idx = TokenIndex { b: rec.sample_index, i: rec.group_index, t };
                    TokenView {
                        token: vocab.name(tok),
                        entropy: row.entropy,
                        sensitivity: row.sensitivity,
                        reasoning: tr.contains(&idx),
                        perception: tp.contains(&idx),
                        weight: mask.record(k)[t],
                    }
                })
                .collect()
        })
        .collect();
    let view = SelectionView {
        question: sample.question.iter().map(|&t| vocab.name(t)).collect::<Vec<_>>().join(" "),
        grid: sample.grid.iter().map(|r| r.iter().map(|&s| tor_core::synthtask::symbol_name(s)).collect()).collect(),
        answer: sample.answer.clone(),
        rollouts,
        reasoning_count: tr.len(),
        perception_count: tp.len(),
        overlap_count: tr.intersection(&tp).count(),
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}
