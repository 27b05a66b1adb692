//! Run configs: a TOML file (or a JSON config or run manifest) plus dotted
//! `--set key=value` overrides applied on the fully materialized config.

use std::path::Path;

use serde_json::Value;
use tor_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub fn load(path: Option<&Path>) -> CliResult<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("config `{}`: {e}", path.display()));
    if path.extension().is_some_and(|x| x == "json") {
        let mut v: Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        // A run manifest carries the config under `config`.
        if let Some(c) = v.get_mut("config") {
            v = c.take();
        }
        serde_json::from_value(v).map_err(|e| bad(&e))
    } else {
        toml::from_str(&text).map_err(|e| bad(&e.message()))
    }
}

/// Parses the right-hand side as a TOML value; bare words become strings.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").and_then(|v| serde_json::to_value(v).ok()))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `key=value` overrides in order. Unknown keys and values the
/// field cannot hold are config errors naming the key.
pub fn apply_overrides(cfg: TrainConfig, sets: &[String]) -> CliResult<TrainConfig> {
    let mut tree = serde_json::to_value(&cfg)?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{set}` is not of the form key=value")))?;
        let key = key.trim();
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
        }
        *node = parse_value(raw);
        serde_json::from_value::<TrainConfig>(tree.clone())
            .map_err(|e| CliError::Config(format!("invalid value for `{key}`: {e}")))?;
    }
    Ok(serde_json::from_value(tree)?)
}

pub fn resolve(path: Option<&Path>, sets: &[String]) -> CliResult<TrainConfig> {
    let cfg = apply_overrides(load(path)?, sets)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Where each default comes from. Keys not listed are engine plumbing.
const ORIGINS: &[(&str, &str)] = &[
    ("selection.alphaR", "published default (30% operating point)"),
    ("selection.alphaP", "published default (30% operating point)"),
    ("selection.gammaR", "published default"),
    ("selection.gammaP", "published default"),
    ("policy.topP", "published default"),
    ("trainer.groupSize", "engine default; published runs sample 12 rollouts"),
    ("trainer.rolloutBatchSize", "engine default; published runs use 512"),
    ("trainer.globalBatchSize", "engine default; published runs use 128"),
    ("trainer.learningRate", "engine default; published runs use 1e-6 on a 7B model"),
    ("objective.epsilon", "engine default; no published value"),
    ("objective.epsilonLow", "engine default; no published value"),
    ("objective.epsilonHigh", "engine default; no published value"),
    ("objective.beta", "engine default; no published value"),
];

/// The config as TOML with a trailing comment on every key saying whether
/// its value is a published default or an engine choice.
pub fn annotated_toml(cfg: &TrainConfig) -> CliResult<String> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = String::new();
    let mut section = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.to_string();
            out.push_str(line);
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            let origin = ORIGINS.iter().find(|(k, _)| *k == full).map_or("engine default", |(_, o)| o);
            out.push_str(&format!("{line}  # {origin}"));
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    Ok(out)
}
