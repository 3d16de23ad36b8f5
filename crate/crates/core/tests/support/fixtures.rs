//! Seeded synthetic layers of random shape.
#![allow(dead_code)]

use kvevict_core::trace::{generate_synthetic_trace, SyntheticShape};
use kvevict_core::LayerData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small layer whose shape is drawn from `seed`: prompt length in
/// `[8, max_prompt]`, head dim in {2, 4, 8, 16}, 1 or 2 KV heads with a
/// group size of 1 to 3, and 1 to 6 decode steps.
pub fn random_layer(seed: u64, max_prompt: u32) -> LayerData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    let kv = rng.random_range(1..=2u32);
    let shape = SyntheticShape {
        num_layers: 1,
        num_q_heads: kv * rng.random_range(1..=3u32),
        num_kv_heads: kv,
        head_dim: [2, 4, 8, 16][rng.random_range(0..4)],
        prompt_len: rng.random_range(8..=max_prompt),
        decode_len: rng.random_range(1..=6u32),
        rope_theta: [10_000.0, 500_000.0][rng.random_range(0..2)],
    };
    generate_synthetic_trace(&shape, seed).unwrap().layer(0).unwrap()
}

pub fn layers_of(shape: &SyntheticShape, seed: u64) -> Vec<LayerData> {
    let t = generate_synthetic_trace(shape, seed).unwrap();
    (0..t.num_layers()).map(|l| t.layer(l).unwrap()).collect()
}

/// A trace of random shape and arbitrary finite `f32` contents, including
/// signed zeros and subnormals.
pub fn random_trace(seed: u64) -> kvevict_core::trace::AttentionTrace {
    use kvevict_core::trace::{AttentionTrace, LayerTensors, RopeLayout, TraceHeader, FORMAT_VERSION};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kv = rng.random_range(1..=3u32);
    let header = TraceHeader {
        version: FORMAT_VERSION,
        num_layers: rng.random_range(1..=3),
        num_q_heads: kv * rng.random_range(1..=3u32),
        num_kv_heads: kv,
        head_dim: 2 * rng.random_range(1..=8u32),
        prompt_len: rng.random_range(1..=24),
        decode_len: rng.random_range(0..=6),
        rope_theta: rng.random_range(2.0..1e6),
        rope_layout: if rng.random() { RopeLayout::Interleaved } else { RopeLayout::HalfSplit },
        seed: rng.random(),
        flags: rng.random_range(0..4),
    };
    let (lp, dec, d) = (header.prompt_len as usize, header.decode_len as usize, header.head_dim as usize);
    let value = |rng: &mut ChaCha8Rng| -> f32 {
        match rng.random_range(0..20) {
            0 => -0.0,
            1 => f32::from_bits(rng.random_range(1..0x0080_0000)),
            2 => f32::MAX,
            _ => rng.random_range(-100.0f32..100.0),
        }
    };
    let layers = (0..header.num_layers)
        .map(|_| LayerTensors {
            keys: (0..kv as usize * lp * d).map(|_| value(&mut rng)).collect(),
            queries: (0..header.num_q_heads as usize * lp * d).map(|_| value(&mut rng)).collect(),
            decode_queries: (0..header.num_q_heads as usize * dec * d).map(|_| value(&mut rng)).collect(),
        })
        .collect();
    AttentionTrace {
        prompt_positions: (0..lp as u32).map(|p| p * rng.random_range(1..3)).collect(),
        decode_positions: (0..dec as u32).map(|p| lp as u32 + p).collect(),
        token_ids: (0..lp).map(|_| rng.random_range(0..50_000)).collect(),
        header,
        layers,
    }
}
