//! Policies and metrics checked against the naive reference.

#[path = "support/fixtures.rs"]
mod fixtures;
#[path = "support/reference.rs"]
mod reference;

use kvevict_core::attention::{PositionedQuery, VisibilityRule};
use kvevict_core::metrics::{
    compute_recall, gold_indices, layer_gold_sets, window_attention_alignment, ObservationWindow,
};
use kvevict_core::policy::{
    select_dapq, select_h2o, select_layer, select_snapkv, select_streaming, CacheBudget,
    ContentStrategy, PolicyConfig, PolicyKind, PseudoQuerySpec,
};
use kvevict_core::trace::{generate_synthetic_trace, SyntheticShape};
use kvevict_core::{IndexSet, LayerData, Matrix, PositionId, Rope, RopeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sets(e: &[IndexSet]) -> Vec<Vec<usize>> {
    e.iter().map(|s| s.as_slice().to_vec()).collect()
}

fn small_layer(prompt_len: u32, decode_len: u32, seed: u64) -> LayerData {
    let shape = SyntheticShape {
        num_layers: 1,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        prompt_len,
        decode_len,
        rope_theta: 10_000.0,
    };
    generate_synthetic_trace(&shape, seed).unwrap().layer(0).unwrap()
}

#[test]
fn dapq_small_instance_matches_reference() {
    let layer = small_layer(16, 4, 7);
    let spec = PseudoQuerySpec::new(4, ContentStrategy::FmLn { first: 1, last: 3 });
    let cfg = PolicyConfig::new(PolicyKind::DapQ);
    let got = select_dapq(&layer, &spec, CacheBudget::new(4).unwrap(), &cfg).unwrap();
    let want = reference::dapq(&layer, &reference::fmln_window(16, 1, 3, 0), true, 4);
    assert_eq!(sets(&got.retained), want);
    assert!(got.retained.iter().all(|s| s.len() == 4));
}

#[test]
fn dapq_prompt_only_matches_reference() {
    let layer = small_layer(24, 2, 9);
    let spec = PseudoQuerySpec {
        position_offset: 5,
        ..PseudoQuerySpec::new(6, ContentStrategy::FmLn { first: 2, last: 4 })
    };
    let cfg = PolicyConfig {
        visibility: VisibilityRule::PromptOnly,
        ..PolicyConfig::new(PolicyKind::DapQ)
    };
    let got = select_dapq(&layer, &spec, CacheBudget::new(7).unwrap(), &cfg).unwrap();
    let want = reference::dapq(&layer, &reference::fmln_window(24, 2, 4, 5), false, 7);
    assert_eq!(sets(&got.retained), want);
}

#[test]
fn snapkv_small_instance_matches_reference() {
    let layer = small_layer(32, 4, 11);
    let cfg = PolicyConfig {
        window: 8,
        ..PolicyConfig::new(PolicyKind::SnapKV)
    };
    let got = select_snapkv(&layer, CacheBudget::new(16).unwrap(), &cfg).unwrap();
    assert_eq!(sets(&got.retained), reference::snapkv(&layer, 8, 7, 16));
    for s in &got.retained {
        assert_eq!(s.len(), 16);
        assert!((24..32).all(|j| s.contains(j)));
    }
}

#[test]
fn h2o_matches_reference_both_normalizations() {
    let layer = small_layer(40, 2, 13);
    for normalize in [false, true] {
        let cfg = PolicyConfig {
            recent_size: Some(5),
            h2o_normalize: normalize,
            ..PolicyConfig::new(PolicyKind::H2O)
        };
        let got = select_h2o(&layer, CacheBudget::new(12).unwrap(), &cfg).unwrap();
        assert_eq!(sets(&got.retained), reference::h2o(&layer, 5, 12, normalize));
    }
}

#[test]
fn gold_three_queries_twelve_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let keys = Matrix::new(12, d, (0..12 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let queries: Vec<PositionedQuery> = (0..3)
        .map(|i| PositionedQuery::new((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), PositionId(12 + i)))
        .collect();
    let positions: Vec<PositionId> = (0..12usize).map(PositionId::from).collect();
    let rope = Rope::new(RopeConfig::new(d)).unwrap();
    let got = gold_indices(&queries, &keys, &positions, 4, &rope).unwrap();

    let rk: Vec<Vec<f64>> = (0..12).map(|j| reference::rope(keys.row(j), j as u64, 1e4)).collect();
    let mut total = vec![0.0; 12];
    for q in &queries {
        let rq = reference::rope(&q.vector, q.position.0, 1e4);
        let logits: Vec<f64> = rk
            .iter()
            .map(|k| rq.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        for (t, w) in total.iter_mut().zip(reference::softmax(&logits)) {
            *t += w;
        }
    }
    assert_eq!(got.as_slice(), reference::topk(&total, 4).as_slice());
    assert_eq!(gold_indices(&queries, &keys, &positions, 12, &rope).unwrap().len(), 12);
}

#[test]
fn layer_gold_sets_match_reference() {
    let layer = small_layer(30, 5, 17);
    let got = layer_gold_sets(&layer, 6).unwrap();
    assert_eq!(sets(&got), reference::gold(&layer, 6));
}

#[test]
fn alignment_size_eight_matches_reference() {
    let shape = SyntheticShape {
        num_layers: 2,
        num_q_heads: 2,
        num_kv_heads: 1,
        head_dim: 8,
        prompt_len: 48,
        decode_len: 8,
        rope_theta: 10_000.0,
    };
    let layers = fixtures::layers_of(&shape, 21);
    let spec = PseudoQuerySpec::new(8, ContentStrategy::FmLn { first: 0, last: 8 });
    let cfg = PolicyConfig::new(PolicyKind::DapQ);
    let table = window_attention_alignment(
        &layers,
        &ObservationWindow::Pseudo(spec),
        &ObservationWindow::LastPrompt,
        &[8],
        &cfg,
    )
    .unwrap();
    let (a, b) = reference::alignment(&layers, 0, 8);
    assert!((table.rows[0].a - a).abs() < 1e-12, "{} vs {a}", table.rows[0].a);
    assert!((table.rows[0].b - b).abs() < 1e-12, "{} vs {b}", table.rows[0].b);

    let gt = window_attention_alignment(
        &layers,
        &ObservationWindow::GroundTruth,
        &ObservationWindow::GroundTruth,
        &[1, 8],
        &cfg,
    )
    .unwrap();
    assert!(gt.rows.iter().all(|r| (r.a - 1.0).abs() < 1e-12));
}

#[test]
fn random_layers_all_policies_match_reference() {
    for seed in 0..40 {
        let layer = fixtures::random_layer(seed, 40);
        let lp = layer.prompt_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let n = rng.random_range(1..=lp.min(8));
        let first = rng.random_range(0..=n);
        let b = rng.random_range(1..=lp);
        let spec = PseudoQuerySpec::new(n, ContentStrategy::FmLn { first, last: n - first });
        let dapq = select_dapq(&layer, &spec, CacheBudget::new(b).unwrap(), &PolicyConfig::new(PolicyKind::DapQ)).unwrap();
        let want = if b >= lp {
            vec![(0..lp).collect(); layer.num_kv_heads()]
        } else {
            reference::dapq(&layer, &reference::fmln_window(lp, first, n - first, 0), true, b)
        };
        assert_eq!(sets(&dapq.retained), want, "dapq seed {seed}");

        let w = rng.random_range(1..=lp.min(8));
        let b = rng.random_range(w..=lp);
        let kernel = [1, 3, 5, 7][rng.random_range(0..4)];
        let cfg = PolicyConfig {
            window: w,
            pool_kernel: kernel,
            ..PolicyConfig::new(PolicyKind::SnapKV)
        };
        let snap = select_snapkv(&layer, CacheBudget::new(b).unwrap(), &cfg).unwrap();
        assert_eq!(sets(&snap.retained), reference::snapkv(&layer, w, kernel, b), "snapkv seed {seed}");

        let h2o = select_layer(&layer, CacheBudget::new(b).unwrap(), &PolicyConfig { kind: PolicyKind::H2O, ..cfg.clone() }).unwrap();
        assert_eq!(sets(&h2o.retained), reference::h2o(&layer, w, b, false), "h2o seed {seed}");

        let sink = rng.random_range(0..b);
        let cfg = PolicyConfig {
            sink_size: sink,
            ..PolicyConfig::new(PolicyKind::StreamingLLM)
        };
        let got = select_streaming(lp, CacheBudget::new(b).unwrap(), &cfg).unwrap();
        assert_eq!(got.as_slice(), reference::streaming(lp, sink, b).as_slice());

        let gold = layer_gold_sets(&layer, b.min(lp)).unwrap();
        let want_gold = reference::gold(&layer, b.min(lp));
        for (g, (wg, pred)) in gold.iter().zip(want_gold.iter().zip(&snap.retained)) {
            let (hits, den) = reference::recall(wg, pred.as_slice());
            assert_eq!(compute_recall(g, pred).unwrap(), hits as f64 / den as f64);
        }
    }
}

#[test]
fn synthetic_smoke() {
    let shape = SyntheticShape {
        num_layers: 2,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        prompt_len: 64,
        decode_len: 8,
        rope_theta: 10_000.0,
    };
    let trace = generate_synthetic_trace(&shape, 42).unwrap();
    trace.validate().unwrap();
    let budget = CacheBudget::new(16).unwrap();
    for l in 0..trace.num_layers() {
        let layer = trace.layer(l).unwrap();
        layer.validate().unwrap();
        for kind in [PolicyKind::DapQ, PolicyKind::SnapKV, PolicyKind::H2O] {
            let cfg = PolicyConfig {
                window: 8,
                pseudo: PseudoQuerySpec::new(8, ContentStrategy::FmLn { first: 2, last: 6 }),
                ..PolicyConfig::new(kind)
            };
            let ev = select_layer(&layer, budget, &cfg).unwrap();
            assert_eq!(ev.retained.len(), 2);
            assert!(ev.retained.iter().all(|s| s.len() == 16), "{kind}");
        }
    }
}
