use std::collections::BTreeMap;

use tor_core::diffcore::Tensor;
use tor_core::error::TorError;
use tor_core::trainer::{
    collect_rollout_batch, minibatch_graph, train_loop, update_step, Algorithm, Optimizer, OptimizerKind, RunOutput,
    TrainConfig, TrainState,
};

fn small(algorithm: Algorithm, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.algorithm = algorithm;
    cfg.trainer.rollout_batch_size = 6;
    cfg.trainer.group_size = 4;
    cfg.trainer.global_batch_size = 24;
    cfg.trainer.total_rollout_batches = 3;
    cfg.trainer.warmup_steps = 5;
    cfg.trainer.eval_samples = 20;
    cfg.trainer.rng_seed = seed;
    cfg
}

fn objective_at(state: &TrainState, c: &tor_core::trainer::Collected, cfg: &TrainConfig) -> f64 {
    let (mut g, ..) = minibatch_graph(&state.params, c, 0..c.batch.records.len(), cfg).unwrap();
    g.evaluate(&state.params).unwrap().item()
}

#[test]
fn one_small_step_raises_the_surrogate_on_most_seeds() {
    for alg in [Algorithm::Grpo, Algorithm::TorGrpo] {
        let mut up = 0;
        let mut flat = 0;
        for seed in 1..=20 {
            let mut cfg = small(alg, seed);
            cfg.trainer.learning_rate = 1e-4;
            let mut state = TrainState::initialize(&cfg).unwrap();
            let c = collect_rollout_batch(&state, &cfg).unwrap();
            let before = objective_at(&state, &c, &cfg);
            update_step(&mut state, &c, &cfg).unwrap();
            let after = objective_at(&state, &c, &cfg);
            if after > before {
                up += 1;
            } else if after == before {
                flat += 1;
            }
        }
        assert!(up > (20 - flat) / 2, "{}: {up} of {} informative seeds improved", alg.name(), 20 - flat);
    }
}

#[test]
fn zero_step_size_leaves_parameters_unchanged() {
    let cfg = small(Algorithm::Grpo, 1);
    let state = TrainState::initialize(&cfg).unwrap();
    let grads: BTreeMap<String, Tensor> = state
        .params
        .tensors()
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::new(t.shape().to_vec(), vec![1.0; t.len()]).unwrap()))
        .collect();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
        let mut params = state.params.clone();
        let mut opt = Optimizer::new(kind, 0.0, 0.9);
        opt.ascend(&mut params, &grads);
        opt.ascend(&mut params, &grads);
        assert_eq!(params, state.params, "{kind:?}");
    }
}

#[test]
fn zero_batches_keeps_initial_parameters() {
    let mut cfg = small(Algorithm::TorGrpo, 2);
    cfg.trainer.total_rollout_batches = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = train_loop(&cfg, &RunOutput { dir: Some(dir.path().into()), keep_selections: false }).unwrap();
    assert!(out.history.is_empty() && out.steps.is_empty());
    assert_eq!(out.initial_greedy_reward, out.final_greedy_reward);
    assert_eq!(std::fs::read(dir.path().join("metrics.jsonl")).unwrap(), b"");
    assert_eq!(
        std::fs::read(dir.path().join("checkpoints/initial.ckpt")).unwrap(),
        std::fs::read(dir.path().join("checkpoints/final.ckpt")).unwrap()
    );
}

#[test]
fn runs_are_deterministic_in_memory() {
    for alg in Algorithm::ALL {
        let cfg = small(alg, 5);
        let a = train_loop(&cfg, &RunOutput::default()).unwrap();
        let b = train_loop(&cfg, &RunOutput::default()).unwrap();
        assert_eq!(a.history, b.history, "{}", alg.name());
        assert_eq!(a.state.params, b.state.params);
    }
}

#[test]
fn reference_policy_stays_frozen() {
    let cfg = small(Algorithm::Grpo, 3);
    let state = TrainState::initialize(&cfg).unwrap();
    let initial = state.params.clone();
    let out = tor_core::trainer::train_from(state, &cfg, &RunOutput::default()).unwrap();
    assert_ne!(out.state.params.tensors(), initial.tensors());
    assert_eq!(out.state.reference().tensors(), initial.tensors());
}

#[test]
fn one_metrics_row_per_batch_and_steps_per_minibatch() {
    let mut cfg = small(Algorithm::TorGrpo, 4);
    cfg.trainer.global_batch_size = 10;
    cfg.trainer.total_rollout_batches = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = train_loop(&cfg, &RunOutput { dir: Some(dir.path().into()), keep_selections: true }).unwrap();
    assert_eq!(out.history.len(), 4);
    assert_eq!(out.selections.len(), 4);
    // 24 rollouts in mini-batches of 10.
    assert_eq!(out.steps.len(), 4 * 3);
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    let text = std::fs::read_to_string(dir.path().join("objective.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert_eq!(out.state.params.version_tag, 4);
}

#[test]
fn first_step_is_on_policy() {
    for alg in Algorithm::ALL {
        let cfg = small(alg, 6);
        let mut state = TrainState::initialize(&cfg).unwrap();
        let c = collect_rollout_batch(&state, &cfg).unwrap();
        let steps = update_step(&mut state, &c, &cfg).unwrap();
        assert!((steps[0].mean_ratio - 1.0).abs() < 1e-9, "{}: {}", alg.name(), steps[0].mean_ratio);
        assert_eq!(steps[0].kl_term, 0.0);
    }
}

#[test]
fn stale_batch_is_rejected() {
    let cfg = small(Algorithm::Grpo, 7);
    let mut state = TrainState::initialize(&cfg).unwrap();
    let c = collect_rollout_batch(&state, &cfg).unwrap();
    update_step(&mut state, &c, &cfg).unwrap();
    let err = update_step(&mut state, &c, &cfg).unwrap_err();
    assert!(matches!(err, TorError::Stale { batch: 0, params: 1 }), "{err}");
}

#[test]
fn minibatch_graph_covers_only_its_range() {
    let cfg = small(Algorithm::TorDapo, 8);
    let state = TrainState::initialize(&cfg).unwrap();
    let c = collect_rollout_batch(&state, &cfg).unwrap();
    let n = c.batch.records.len();
    let (_, _, inputs, weights) = minibatch_graph(&state.params, &c, 1..n.min(3), &cfg).unwrap();
    let tokens: usize = c.batch.records[1..n.min(3)].iter().map(|r| r.len()).sum();
    assert_eq!(inputs.total_tokens(), tokens);
    assert_eq!(weights.map(|w| w.len()), Some(tokens));
}
