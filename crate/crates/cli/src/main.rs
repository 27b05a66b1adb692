//! `tor`: train, analyze, gradient-check and compare token-reweighted RL runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad config or arguments,
//! 3 numeric abort, 4 checkpoint mismatch, 5 gradient check failure.

mod config;
mod error;
mod manifest;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tor_core::analysis::analyze;
use tor_core::policy::PolicyParams;
use tor_core::scoring::ScoreField;
use tor_core::trainer::{
    gradient_check, summarize, train_loop, write_summary_csv, Algorithm, RunOutput, TrainConfig,
};
use tor_core::TorError;

use crate::error::{CliError, CliResult};
use crate::manifest::{create_run_dir, default_run_id, output_root, sanitize, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "tor", version, about = "Token-reweighted policy optimization on synthetic grid tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config, or a JSON config or run manifest. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set selection.gammaP=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the training loop and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Sample a fresh batch under a checkpoint and write every analysis report.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Index into the task stream; also seeds the rollouts.
        #[arg(long, default_value_t = 0)]
        batch: u64,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Finite-difference check of all four objectives on a tiny policy.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Scale one adjoint during the backward pass (negative control).
        #[arg(long)]
        corrupt_adjoint: bool,
    },
    /// Run every (variant, seed) pair and summarize final greedy rewards.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated algorithms, each optionally followed by bracketed
        /// overrides: `grpo,tor-grpo,tor-grpo[selection.gammaP=0]`.
        #[arg(long)]
        algorithms: String,
        /// Comma-separated seeds or inclusive ranges such as `1-5`.
        #[arg(long)]
        seeds: String,
        /// One extra variant per value: `selection.alphaR=0.2,0.3,0.4`.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print the resolved config as annotated TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train { cfg, run_id } => {
            let config = config::resolve(cfg.config.as_deref(), &cfg.sets)?;
            let id = run_id.unwrap_or_else(|| default_id(&config));
            let dir = create_run_dir(&output_root(), &sanitize(&id))?;
            let reward = train_run(&config, &dir, &id, "train")?;
            println!("run {id}: final greedy reward {reward:.4}");
            println!("{}", dir.display());
            Ok(())
        }
        Command::Analyze { checkpoint, cfg, batch, run_id } => {
            let config = config::resolve(cfg.config.as_deref(), &cfg.sets)?;
            analyze_command(&checkpoint, &config, batch, run_id)
        }
        Command::Gradcheck { cfg, step, tolerance, corrupt_adjoint } => {
            let config = config::resolve(cfg.config.as_deref(), &cfg.sets)?;
            gradcheck_command(&config, step, tolerance, corrupt_adjoint)
        }
        Command::Compare { cfg, algorithms, seeds, sweep, run_id } => {
            let config = config::resolve(cfg.config.as_deref(), &cfg.sets)?;
            compare_command(&config, &algorithms, &seeds, sweep.as_deref(), run_id)
        }
        Command::Config { cfg } => {
            let config = config::resolve(cfg.config.as_deref(), &cfg.sets)?;
            print!("{}", config::annotated_toml(&config)?);
            Ok(())
        }
    }
}

fn default_id(cfg: &TrainConfig) -> String {
    default_run_id(&format!("{}-seed{}", cfg.algorithm.name(), cfg.trainer.rng_seed))
}

/// Trains into `dir`, keeping the manifest current. Returns the final
/// greedy reward.
fn train_run(cfg: &TrainConfig, dir: &Path, id: &str, command: &str) -> CliResult<f64> {
    let mut manifest = RunManifest::new(id, command, cfg);
    manifest.write(dir)?;
    let output = RunOutput { dir: Some(dir.to_path_buf()), keep_selections: false };
    match train_loop(cfg, &output) {
        Ok(outcome) => {
            manifest.finalize(dir, "ok")?;
            Ok(outcome.final_greedy_reward)
        }
        Err(TorError::Diverged { batch, minibatch, dump }) => {
            let path = dir.join("diverged.json");
            fs::write(&path, dump)?;
            manifest.finalize(dir, "diverged")?;
            Err(CliError::Numeric {
                message: format!("non-finite update at rollout batch {batch}, mini-batch {minibatch}"),
                dump: path,
            })
        }
        Err(TorError::Numeric { node, op }) => {
            let path = dir.join("diverged.json");
            fs::write(&path, format!("{{\"node\":{node},\"op\":\"{op}\"}}\n"))?;
            manifest.finalize(dir, "diverged")?;
            Err(CliError::Numeric { message: format!("non-finite value at node {node} ({op})"), dump: path })
        }
        Err(e) => {
            manifest.finalize(dir, "failed")?;
            Err(e.into())
        }
    }
}

/// A checkpoint inside `<run>/checkpoints/` reports into `<run>/analysis/`
/// and extends that run's manifest; anything else gets a fresh run directory.
fn analyze_command(checkpoint: &Path, cfg: &TrainConfig, batch: u64, run_id: Option<String>) -> CliResult<()> {
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!("checkpoint `{}` not found", checkpoint.display())));
    }
    let params = PolicyParams::load(checkpoint).map_err(|e| match e {
        TorError::Io(io) => CliError::Checkpoint(format!("`{}` is unreadable: {io}", checkpoint.display())),
        other => other.into(),
    })?;
    if params.arch() != &cfg.architecture() {
        return Err(CliError::Checkpoint(format!(
            "`{}` was written for a different architecture than the config describes",
            checkpoint.display()
        )));
    }
    let parent_run = checkpoint
        .parent()
        .filter(|p| p.file_name().is_some_and(|n| n == "checkpoints"))
        .and_then(Path::parent)
        .filter(|run| run.join(manifest::MANIFEST).exists());
    let (dir, mut manifest) = match parent_run {
        Some(run) => (run.to_path_buf(), RunManifest::load(run)?),
        None => {
            let id = run_id.unwrap_or_else(|| default_run_id("analyze"));
            let dir = create_run_dir(&output_root(), &sanitize(&id))?;
            let m = RunManifest::new(&id, "analyze", cfg);
            m.write(&dir)?;
            (dir, m)
        }
    };
    let report = analyze(&params, cfg, batch)?;
    let paths = report.write_reports(&dir.join("analysis"), &sanitize(&manifest.run_id))?;
    manifest.finalize(&dir, "ok")?;
    let rho = report.proxies.get(ScoreField::ProbDiff, ScoreField::Sensitivity);
    println!("batch {batch}: {} tokens, mean reward {:.4}", report.table.len(), mean(&report.rewards));
    println!(
        "spearman(probDiff, sensitivity) = {}",
        rho.map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"))
    );
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn gradcheck_command(cfg: &TrainConfig, h: f64, tolerance: f64, corrupt: bool) -> CliResult<()> {
    let mut worst: Option<String> = None;
    for algorithm in Algorithm::ALL {
        let check = gradient_check(cfg, algorithm, h, tolerance, corrupt.then_some(1.5))?;
        let r = &check.report;
        println!(
            "{:<9} params {:>4}  max relative error {:.3e}  {}",
            algorithm.name(),
            check.num_parameters,
            r.max_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed && worst.is_none() {
            worst = Some(match &r.worst {
                Some((name, idx, a, n)) => {
                    format!("{}: worst coordinate {name}[{idx}] analytic {a:.6e} numeric {n:.6e}", algorithm.name())
                }
                None => algorithm.name().to_string(),
            });
        }
    }
    match worst {
        Some(w) => Err(CliError::GradCheck(w)),
        None => Ok(()),
    }
}

/// Splits on commas outside brackets.
fn split_top(list: &str) -> Vec<String> {
    let mut out = Vec::new();
    let (mut depth, mut cur) = (0i32, String::new());
    for c in list.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur);
    out.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// A labelled algorithm plus its own overrides.
#[derive(Debug, Clone, PartialEq)]
struct Variant {
    label: String,
    algorithm: Algorithm,
    sets: Vec<String>,
}

fn parse_variants(list: &str) -> CliResult<Vec<Variant>> {
    let entries = split_top(list);
    if entries.is_empty() {
        return Err(CliError::Config("--algorithms needs at least one entry".into()));
    }
    entries
        .into_iter()
        .map(|entry| {
            let (name, sets) = match entry.split_once('[') {
                Some((name, rest)) => {
                    let inner = rest
                        .strip_suffix(']')
                        .ok_or_else(|| CliError::Config(format!("unbalanced brackets in `{entry}`")))?;
                    (name.trim(), inner.split([';', ',']).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                }
                None => (entry.as_str(), Vec::new()),
            };
            let algorithm = Algorithm::parse(name)
                .ok_or_else(|| CliError::Config(format!("unknown algorithm `{name}`")))?;
            Ok(Variant { label: entry.clone(), algorithm, sets })
        })
        .collect()
}

fn parse_seeds(list: &str) -> CliResult<Vec<u64>> {
    let bad = |s: &str| CliError::Config(format!("bad seed `{s}`"));
    let mut seeds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad(part))?, b.parse().map_err(|_| bad(part))?);
                if a > b {
                    return Err(bad(part));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Config("--seeds needs at least one seed".into()));
    }
    Ok(seeds)
}

/// Crosses variants with the sweep values, if any.
fn expand_sweep(variants: Vec<Variant>, sweep: Option<&str>) -> CliResult<Vec<Variant>> {
    let Some(sweep) = sweep else {
        return Ok(variants);
    };
    let (key, values) =
        sweep.split_once('=').ok_or_else(|| CliError::Config(format!("sweep `{sweep}` is not of the form key=v1,v2")))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config(format!("sweep `{sweep}` has no values")));
    }
    let mut out = Vec::new();
    for v in &variants {
        for value in &values {
            let set = format!("{}={value}", key.trim());
            let mut sets = v.sets.clone();
            sets.push(set.clone());
            let label = match v.label.strip_suffix(']') {
                Some(open) => format!("{open};{set}]"),
                None => format!("{}[{set}]", v.label),
            };
            out.push(Variant { label, algorithm: v.algorithm, sets });
        }
    }
    Ok(out)
}

fn compare_command(base: &TrainConfig, algorithms: &str, seeds: &str, sweep: Option<&str>, run_id: Option<String>) -> CliResult<()> {
    let variants = expand_sweep(parse_variants(algorithms)?, sweep)?;
    let seeds = parse_seeds(seeds)?;
    // Resolve every config before spending time on training.
    let mut plans = Vec::new();
    for v in &variants {
        let mut cfg = base.clone();
        cfg.algorithm = v.algorithm;
        let cfg = config::apply_overrides(cfg, &v.sets)?;
        cfg.validate()?;
        plans.push(cfg);
    }
    let id = run_id.unwrap_or_else(|| default_run_id("compare"));
    let dir = create_run_dir(&output_root(), &sanitize(&id))?;
    let mut manifest = RunManifest::new(&id, "compare", base);
    manifest.write(&dir)?;
    let mut rows = Vec::new();
    let mut first_error: Option<CliError> = None;
    for (v, cfg) in variants.iter().zip(&plans) {
        let mut values = Vec::new();
        for &seed in &seeds {
            let mut cfg = cfg.clone();
            cfg.trainer.rng_seed = seed;
            let run = sanitize(&format!("{}-seed{seed}", v.label));
            let run_dir = create_run_dir(&dir, &run)?;
            match train_run(&cfg, &run_dir, &run, "compare") {
                Ok(r) => {
                    println!("{:<40} seed {seed:>3}  final greedy reward {r:.4}", v.label);
                    values.push(Some(r));
                }
                Err(e) => {
                    eprintln!("{:<40} seed {seed:>3}  failed: {e}", v.label);
                    values.push(None);
                    first_error.get_or_insert(e);
                }
            }
        }
        rows.push(summarize(&v.label, values));
    }
    let summary = dir.join("summary.csv");
    write_summary_csv(BufWriter::new(fs::File::create(&summary)?), &rows)?;
    manifest.finalize(&dir, if first_error.is_some() { "failed" } else { "ok" })?;
    for r in &rows {
        let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!("{:<40} mean {}  std {}  failed {}", r.variant, f(r.mean), f(r.std), r.failed);
    }
    println!("{}", summary.display());
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_lists_split_at_top_level() {
        let v = parse_variants("grpo, tor-grpo[selection.gammaP=0;selection.alphaR=0.5],tor-dapo").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1].algorithm, Algorithm::TorGrpo);
        assert_eq!(v[1].sets, vec!["selection.gammaP=0", "selection.alphaR=0.5"]);
        assert!(parse_variants("grpo,ppo").is_err());
        assert!(parse_variants("tor-grpo[selection.gammaP=0").is_err());
    }

    #[test]
    fn seeds_accept_ranges() {
        assert_eq!(parse_seeds("1-3,7").unwrap(), vec![1, 2, 3, 7]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn sweep_gives_one_variant_per_value() {
        let v = parse_variants("tor-grpo").unwrap();
        let swept = expand_sweep(v, Some("selection.alphaR=0.2,0.3,0.4,0.5,0.6,0.7,0.8")).unwrap();
        assert_eq!(swept.len(), 7);
        assert_eq!(swept[0].label, "tor-grpo[selection.alphaR=0.2]");
        let v = parse_variants("tor-grpo[selection.gammaP=0]").unwrap();
        let swept = expand_sweep(v, Some("selection.alphaP=0.5")).unwrap();
        assert_eq!(swept[0].label, "tor-grpo[selection.gammaP=0;selection.alphaP=0.5]");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = config::apply_overrides(
            TrainConfig::default(),
            &["selection.gammaP=0.25".into(), "algorithm=tor-dapo".into(), "trainer.groupSize=4".into()],
        )
        .unwrap();
        assert_eq!(cfg.selection.gamma_p, 0.25);
        assert_eq!(cfg.algorithm, Algorithm::TorDapo);
        assert_eq!(cfg.trainer.group_size, 4);
        let err = config::apply_overrides(TrainConfig::default(), &["selection.gamma=1".into()]).unwrap_err();
        assert!(err.to_string().contains("selection.gamma"));
        assert_eq!(err.exit_code(), 2);
    }
}
