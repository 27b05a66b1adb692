mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tor_core::objectives::{clipped_term, dynamic_sample_filter, group_advantage, kl_penalty, StdMode};
use tor_core::policy::{Architecture, PolicyConfig, PolicyParams};
use tor_core::scoring::{rank_correlation, shannon_entropy, token_entropy, ScoreField};
use tor_core::selection::{build_weight_mask, select_tokens, SelectionConfig};
use tor_core::synthtask::{generate_sample, gold_response, solve, verify, TaskConfig, Vocab};

use common::{flat_table, random_batch, table_for};

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40).prop_map(|w| {
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            let mut one = vec![0.0; w.len()];
            one[0] = 1.0;
            one
        } else {
            w.iter().map(|x| x / total).collect()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn top_p_entropy_grows_with_p_up_to_shannon(probs in distribution(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let h_lo = token_entropy(&probs, lo).unwrap();
        let h_hi = token_entropy(&probs, hi).unwrap();
        prop_assert!(h_lo >= 0.0);
        prop_assert!(h_lo <= h_hi + 1e-12);
        prop_assert!(h_hi <= shannon_entropy(&probs) + 1e-12);
    }

    #[test]
    fn advantages_ignore_affine_reward_changes(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..16),
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let base = group_advantage(&rewards, 1e-12, StdMode::Population).unwrap().advantages;
        let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
        let other = group_advantage(&moved, 1e-12, StdMode::Population).unwrap().advantages;
        let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        for (x, y) in base.iter().zip(&other) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn clipped_term_is_pessimistic(ratio in 0.0f64..3.0, adv in -3.0f64..3.0, lo in 0.0f64..0.5, hi in 0.0f64..0.5) {
        let t = clipped_term(ratio, adv, lo, hi);
        prop_assert!(t <= ratio * adv + 1e-15);
        if (1.0 - lo..=1.0 + hi).contains(&ratio) {
            prop_assert_eq!(t, ratio * adv);
        }
    }

    #[test]
    fn kl_estimate_is_nonnegative(a in -8.0f64..0.0, b in -8.0f64..0.0) {
        let k = kl_penalty(a, b);
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_penalty(a, a), 0.0);
    }

    #[test]
    fn filter_keeps_exactly_the_mixed_groups(groups in prop::collection::vec(prop::collection::vec(0u8..2, 2..6), 0..10)) {
        let rewards: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|&r| f64::from(r)).collect()).collect();
        let kept = dynamic_sample_filter(&rewards);
        let expect: Vec<usize> = (0..groups.len()).filter(|&k| groups[k].iter().any(|&r| r != groups[k][0])).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn larger_alpha_selects_a_superset(scores in prop::collection::vec(0.0f64..4.0, 1..80), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let table = flat_table(&scores, &scores);
        let small = select_tokens(&table, ScoreField::Entropy, lo).unwrap();
        let large = select_tokens(&table, ScoreField::Entropy, hi).unwrap();
        prop_assert!(small.is_subset(&large));
        prop_assert!(!small.is_empty());
    }

    #[test]
    fn zero_perception_weight_keeps_only_reasoning_tokens(seed in any::<u64>(), ar in 0.05f64..=1.0, ap in 0.05f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 3, 3, 6);
        let table = table_for(&batch);
        let tr = select_tokens(&table, ScoreField::Entropy, ar).unwrap();
        let tp = select_tokens(&table, ScoreField::Sensitivity, ap).unwrap();
        let cfg = SelectionConfig { alpha_r: ar, alpha_p: ap, gamma_r: 1.0, gamma_p: 0.0, ..Default::default() };
        let mask = build_weight_mask(&tr, &tp, &cfg, &batch).unwrap();
        let support = mask.weights().iter().filter(|&&w| w != 0.0).count();
        prop_assert_eq!(support, tr.len());
    }

    #[test]
    fn rank_correlation_is_symmetric_and_bounded(pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..50)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(x), Ok(y)) = (rank_correlation(&a, &b), rank_correlation(&b, &a)) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
        }
    }

    #[test]
    fn gold_responses_earn_reward(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, k in 2usize..6) {
        let task = TaskConfig { grid_height: h, grid_width: w, alphabet_size: k, ..TaskConfig::default() };
        let vocab = Vocab::for_task(&task);
        let s = generate_sample(seed, &task);
        prop_assert_eq!(&s, &generate_sample(seed, &task));
        prop_assert_eq!(solve(&vocab, &s.cells(), &s.question), Some(s.answer.clone()));
        prop_assert_eq!(verify(&vocab, &gold_response(&vocab, &s), &s.answer), 1);
        prop_assert!(s.question.len() <= task.max_question_len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let arch = Architecture::new(&PolicyConfig::default(), &TaskConfig::default());
        let mut params = PolicyParams::init(arch, seed);
        params.version_tag = seed % 1000;
        let mut bytes = Vec::new();
        params.write_checkpoint(&mut bytes).unwrap();
        let back = PolicyParams::read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, params);
    }
}
