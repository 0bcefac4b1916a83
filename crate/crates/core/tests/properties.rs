mod common;

use chanprune::compute::{instrumented_macs, smooth_normalize, total_flops};
use chanprune::dataio::{epoch_batches, synthetic, SyntheticSpec};
use chanprune::diffcore::Mode;
use chanprune::netgraph::he_init;
use chanprune::pruner::{shrink, threshold_select};
use chanprune::scoring::{score_3sp, Criterion, ScoreMeta, ScoreSet};
use common::{random_mask, random_net, uniform};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn score_set(values: Vec<Vec<f64>>) -> ScoreSet {
    ScoreSet {
        criterion: Criterion::ThreeSp,
        layers: (0..values.len()).collect(),
        signed: values.clone(),
        values,
        meta: ScoreMeta::default(),
    }
}

/// Scores drawn from a small alphabet so ties are common.
fn layered_scores() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((0u8..6).prop_map(|v| v as f64 * 0.25), 1..12), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn threshold_prunes_floor_count_in_order(values in layered_scores(), p in 0.0f64..=1.0) {
        let sel = threshold_select(&score_set(values.clone()), p).unwrap();
        let n: usize = values.iter().map(Vec::len).sum();
        let expected = (p * n as f64).floor() as usize;
        prop_assert_eq!(sel.prune_count, expected);
        prop_assert_eq!(sel.masks.pruned_units(), expected);

        let flat: Vec<f64> = values.concat();
        let keep: Vec<bool> = sel.masks.entries.iter().flat_map(|e| e.keep.clone()).collect();
        let key = |i: usize| (flat[i], i);
        let worst_pruned = (0..n).filter(|&i| !keep[i]).map(key).max_by(|a, b| a.partial_cmp(b).unwrap());
        let best_kept = (0..n).filter(|&i| keep[i]).map(key).min_by(|a, b| a.partial_cmp(b).unwrap());
        if let (Some(a), Some(b)) = (worst_pruned, best_kept) {
            prop_assert!(a < b, "pruned {a:?} ranks above kept {b:?}");
        }
    }

    #[test]
    fn normalized_costs_are_scale_free(costs in prop::collection::vec(1.0f64..1e6, 1..10), k in 1e-3f64..1e3) {
        let base = smooth_normalize(&costs, 0.0).unwrap();
        let scaled: Vec<f64> = costs.iter().map(|c| c * k).collect();
        for (a, b) in base.iter().zip(smooth_normalize(&scaled, 0.0).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert!(base.iter().all(|&c| c > 0.0 && c <= 1.0));
        prop_assert_eq!(base.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn larger_lambda_flattens_costs(costs in prop::collection::vec(1.0f64..1e6, 2..10), l1 in 0.0f64..1e6, dl in 0.0f64..1e6) {
        let a = smooth_normalize(&costs, l1).unwrap();
        let b = smooth_normalize(&costs, l1 + dl).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*y >= *x - 1e-12);
        }
    }

    #[test]
    fn epoch_batches_partition_indices(n in 0usize..300, bs in 1usize..64, seed: u64, epoch in 0usize..5) {
        let batches = epoch_batches(n, bs, seed, epoch);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&batches, &epoch_batches(n, bs, seed, epoch));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shrunken_model_matches_masked_model(seed: u64, with_bn: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_net(&mut rng, with_bn);
        let masks = random_mask(&m, &mut rng);
        let s = shrink(&m, &masks).unwrap();
        let [c, h, w] = m.input_shape;
        let x = uniform(&[3, c, h, w], &mut rng);
        for mode in [Mode::Eval, Mode::Train] {
            let masked = m.forward_masked(&masks, &x, mode).unwrap();
            let small = s.forward_masked(&s.all_ones_mask(), &x, mode).unwrap();
            let scale = masked.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for (a, b) in masked.data().iter().zip(small.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * scale, "{mode:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shrinking_never_adds_flops(seed: u64, with_bn: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_net(&mut rng, with_bn);
        let s = shrink(&m, &random_mask(&m, &mut rng)).unwrap();
        let (before, after) = (total_flops(&m).unwrap(), total_flops(&s).unwrap());
        prop_assert!(after.total() <= before.total());
        prop_assert!(s.param_count() <= m.param_count());
        prop_assert_eq!(after.mac_flops, 2 * instrumented_macs(&s).unwrap());
    }

    #[test]
    fn seeded_pipeline_is_deterministic(seed in 0u64..1000) {
        let spec = SyntheticSpec { size: 8, classes: 3, ..SyntheticSpec::default() };
        let d = synthetic(&spec, 12, seed, seed + 1).unwrap();
        prop_assert_eq!(&d, &synthetic(&spec, 12, seed, seed + 1).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random_net(&mut rng, true);
        let mut b = a.clone();
        he_init(&mut a, seed);
        he_init(&mut b, seed);
        prop_assert_eq!(&a, &b);

        let [c, h, w] = a.input_shape;
        let x = uniform(&[4, c, h, w], &mut rng);
        let s1 = score_3sp(&a, &x, &[0, 1, 2, 0]).unwrap();
        let s2 = score_3sp(&a, &x, &[0, 1, 2, 0]).unwrap();
        prop_assert_eq!(s1.values, s2.values);
    }
}
