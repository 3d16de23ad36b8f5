//! Universal properties of scoring, recall, similarity and budgets.

#[path = "support/fixtures.rs"]
mod fixtures;

use kvevict_core::attention::{accumulate_importance, AttentionRow, PositionedQuery, VisibilityRule};
use kvevict_core::metrics::{
    compute_recall, offset_decay_curve, similarity_experiment, tv_similarity, Condition,
};
use kvevict_core::policy::{
    allocate_pyramid_budgets, dapq_scores, ContentStrategy, PolicyConfig, PolicyKind,
    PseudoQuerySpec,
};
use kvevict_core::tensor::{vector_distance, Norm};
use kvevict_core::trace::SyntheticShape;
use kvevict_core::{Error, IndexSet, Matrix, PositionId, Rope, RopeConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn prompt_only_mass_is_window_length() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * rng.random_range(1..=16);
        let lp = rng.random_range(1..=48);
        let n = rng.random_range(1..=12);
        let mut gauss = |k: usize| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let keys = Matrix::new(lp, d, gauss(lp * d)).unwrap();
        let window: Vec<PositionedQuery> = (0..n)
            .map(|i| PositionedQuery::new(gauss(d), PositionId((lp + i) as u64)))
            .collect();
        let positions: Vec<PositionId> = (0..lp).map(PositionId::from).collect();
        let rope = Rope::new(RopeConfig::new(d)).unwrap();
        let s = accumulate_importance(&window, &keys, &positions, lp, VisibilityRule::PromptOnly, &rope).unwrap();
        let total: f64 = s.scores.iter().sum();
        assert!((total - n as f64).abs() < 1e-9, "seed {seed}: {total}");
    }
}

#[test]
fn missing_pseudo_keys_reported() {
    let rope = Rope::new(RopeConfig::new(2)).unwrap();
    let keys = Matrix::new(3, 2, vec![1.0; 6]).unwrap();
    let pos: Vec<PositionId> = (0..3usize).map(PositionId::from).collect();
    let w = vec![PositionedQuery::new(vec![1.0, 0.0], PositionId(3)); 2];
    let err = accumulate_importance(&w, &keys, &pos, 3, VisibilityRule::PromptPlusPrecedingPseudo, &rope);
    assert!(matches!(err, Err(Error::MissingPseudoKeys { needed: 5, provided: 3 })));
}

#[test]
fn dapq_scores_invariant_to_global_shift() {
    for seed in 0..10 {
        let layer = fixtures::random_layer(seed, 32);
        let lp = layer.prompt_len();
        let spec = PseudoQuerySpec::new(4.min(lp), ContentStrategy::FmLn { first: 1, last: 4.min(lp) - 1 });
        let cfg = PolicyConfig::new(PolicyKind::DapQ);
        let base = dapq_scores(&layer, &spec, &cfg).unwrap();
        let delta = 1000 + seed as i64 * 37;
        let mut shifted = layer.clone();
        for p in &mut shifted.prompt_positions {
            *p = p.shifted(delta as u64);
        }
        let spec2 = PseudoQuerySpec {
            position_offset: delta,
            ..spec
        };
        let moved = dapq_scores(&shifted, &spec2, &cfg).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() < 1e-9, "seed {seed}");
            }
        }
    }
}

fn small_shape() -> SyntheticShape {
    SyntheticShape {
        num_layers: 2,
        num_q_heads: 2,
        num_kv_heads: 1,
        head_dim: 16,
        prompt_len: 64,
        decode_len: 8,
        rope_theta: 10_000.0,
    }
}

#[test]
fn same_position_conditions_preserve_similarity() {
    let layers = fixtures::layers_of(&small_shape(), 4);
    let sc = similarity_experiment(&layers, Condition::ScSp, 3, 1).unwrap();
    assert!((sc.pre_rope - 1.0).abs() < 1e-9 && (sc.post_rope - 1.0).abs() < 1e-9);
    let dc = similarity_experiment(&layers, Condition::DcSp, 10, 1).unwrap();
    for t in &dc.per_trial {
        assert!((t.pre_rope - t.post_rope).abs() < 1e-9);
    }
    let again = similarity_experiment(&layers, Condition::DcSp, 10, 1).unwrap();
    assert_eq!(dc, again);
}

#[test]
fn missing_decode_phase() {
    let shape = SyntheticShape {
        decode_len: 0,
        ..small_shape()
    };
    let layers = fixtures::layers_of(&shape, 1);
    assert!(matches!(
        similarity_experiment(&layers, Condition::ScDp, 1, 0),
        Err(Error::MissingDecodePhase)
    ));
}

#[test]
fn offset_curve_edges() {
    let layers = fixtures::layers_of(&small_shape(), 2);
    let empty = offset_decay_curve(&layers, &[], true, 0).unwrap();
    assert!(empty.points.is_empty() && empty.spearman.is_none());
    let c = offset_decay_curve(&layers, &[64, 0, 32], true, 0).unwrap();
    assert_eq!(c.points[0].abs_offset, 0);
    assert_eq!(c.points[0].similarity, 1.0);
    assert!(c.points.iter().all(|p| p.similarity <= 1.0 + 1e-12));
    assert!(matches!(offset_decay_curve(&layers, &[65], true, 0), Err(Error::InvalidConfig(_))));
}

proptest! {
    #[test]
    fn recall_invariant_under_relabeling(
        gold in prop::collection::btree_set(0usize..64, 1..20),
        pred in prop::collection::btree_set(0usize..64, 0..20),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..64).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let g = IndexSet::from_iter(gold.iter().cloned());
        let p = IndexSet::from_iter(pred.iter().cloned());
        let g2 = IndexSet::from_iter(gold.iter().map(|&i| perm[i]));
        let p2 = IndexSet::from_iter(pred.iter().map(|&i| perm[i]));
        let r = compute_recall(&g, &p).unwrap();
        prop_assert_eq!(r, compute_recall(&g2, &p2).unwrap());
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn tv_matches_l1_distance(raw in prop::collection::vec((0.001f64..1.0, 0.001f64..1.0), 1..40)) {
        let za: f64 = raw.iter().map(|x| x.0).sum();
        let zb: f64 = raw.iter().map(|x| x.1).sum();
        let a: Vec<f64> = raw.iter().map(|x| x.0 / za).collect();
        let b: Vec<f64> = raw.iter().map(|x| x.1 / zb).collect();
        let tv = tv_similarity(
            &AttentionRow::from_weights(a.clone()).unwrap(),
            &AttentionRow::from_weights(b.clone()).unwrap(),
        ).unwrap();
        let l1 = vector_distance(&a, &b, Norm::L1).unwrap();
        prop_assert_eq!(tv, 1.0 - 0.5 * l1);
        prop_assert!((-1e-12..=1.0).contains(&tv));
    }

    #[test]
    fn pyramid_budgets_conserve_total(budget in 1usize..5000, layers in 1usize..80, window in 0usize..64) {
        prop_assume!(budget >= window.max(1));
        let b = allocate_pyramid_budgets(budget, layers, window).unwrap();
        prop_assert_eq!(b.len(), layers);
        prop_assert_eq!(b.iter().sum::<usize>(), budget * layers);
        prop_assert!(b.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(b.iter().all(|&x| x >= window));
    }
}
