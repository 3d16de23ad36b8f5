//! Measurement apparatus: gold-set recall, query similarity studies, window
//! attention alignment and the query-to-attention divergence bound checker.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionRow, PositionedQuery};
use crate::error::{invalid_config, invalid_dim, Error, Result};
use crate::layer::LayerData;
use crate::policy::{dapq_scores, PolicyConfig, PseudoQuerySpec};
use crate::rope::{PositionId, Rope};
use crate::tensor::{
    cosine_similarity, dot, l2_norm, normalize, softmax_unchecked, top_k_indices, vector_distance,
    IndexSet, Matrix, Norm,
};

/// Slack used when deciding whether an inequality holds.
pub const BOUND_SLACK: f64 = 1e-9;

/// Aggregation used by every similarity report.
pub const SIMILARITY_AGGREGATION: &str =
    "per-head cosine, uniform mean over heads and layers, then over window positions";

// ---------------------------------------------------------------- recall

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub gold: IndexSet,
    pub pred: IndexSet,
    /// `|gold ∩ pred|`
    pub hits: usize,
    pub recall: f64,
    pub budget: usize,
    pub window: String,
}

impl RecallReport {
    pub fn new(gold: IndexSet, pred: IndexSet, budget: usize, window: impl Into<String>) -> Result<Self> {
        let recall = compute_recall(&gold, &pred)?;
        Ok(Self {
            hits: gold.intersection_len(&pred),
            gold,
            pred,
            recall,
            budget,
            window: window.into(),
        })
    }
}

/// `|gold ∩ pred| / |gold|`, computed from integer counts.
pub fn compute_recall(gold: &IndexSet, pred: &IndexSet) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::InvalidInput("gold set is empty".into()));
    }
    Ok(gold.intersection_len(pred) as f64 / gold.len() as f64)
}

/// Top-`budget` keys by attention accumulated over every response query.
pub fn gold_indices(
    response: &[PositionedQuery],
    keys: &Matrix,
    key_positions: &[PositionId],
    budget: usize,
    rope: &Rope,
) -> Result<IndexSet> {
    if response.is_empty() {
        return Err(Error::InvalidInput("no response queries".into()));
    }
    if budget == 0 {
        return Err(invalid_config("gold budget must be >= 1"));
    }
    let totals = accumulated_attention(response, keys, key_positions, rope)?;
    Ok(top_k_indices(&totals, budget))
}

/// Sum of full (unmasked) attention rows of `queries` over `keys`.
fn accumulated_attention(
    queries: &[PositionedQuery],
    keys: &Matrix,
    key_positions: &[PositionId],
    rope: &Rope,
) -> Result<Vec<f64>> {
    let d = rope.head_dim();
    if keys.rows() == 0 {
        return Err(invalid_dim("no keys"));
    }
    if keys.cols() != d || key_positions.len() != keys.rows() {
        return Err(invalid_dim("keys do not match head_dim or positions"));
    }
    let rotated = rope.apply_rows(keys.as_slice(), key_positions);
    let scale = 1.0 / (d as f64).sqrt();
    let mut totals = vec![0.0; keys.rows()];
    for rq in queries {
        let q = rope.apply(&rq.vector, rq.position)?;
        let logits: Vec<f64> = rotated.chunks_exact(d).map(|k| dot(&q, k) * scale).collect();
        for (t, w) in totals.iter_mut().zip(softmax_unchecked(&logits)) {
            *t += w;
        }
    }
    Ok(totals)
}

fn decode_window(layer: &LayerData, q_head: usize) -> Vec<PositionedQuery> {
    layer.decode_queries[q_head]
        .iter_rows()
        .zip(&layer.decode_positions)
        .map(|(r, &p)| PositionedQuery::new(r.to_vec(), p))
        .collect()
}

/// Decode-query attention over the prompt, summed per KV head.
fn decode_attention(layer: &LayerData) -> Result<Vec<Vec<f64>>> {
    if layer.decode_len() == 0 {
        return Err(Error::MissingDecodePhase);
    }
    let rope = Rope::new(layer.rope)?;
    (0..layer.num_kv_heads())
        .map(|kv| {
            let queries: Vec<PositionedQuery> =
                layer.q_heads_of(kv).flat_map(|h| decode_window(layer, h)).collect();
            accumulated_attention(&queries, &layer.keys[kv], &layer.prompt_positions, &rope)
        })
        .collect()
}

/// Gold sets for every KV head of a layer, from all stored decode queries.
pub fn layer_gold_sets(layer: &LayerData, budget: usize) -> Result<Vec<IndexSet>> {
    if budget == 0 {
        return Err(invalid_config("gold budget must be >= 1"));
    }
    Ok(decode_attention(layer)?
        .iter()
        .map(|t| top_k_indices(t, budget))
        .collect())
}

// ---------------------------------------------------------------- bounds

/// Left and right sides of the four query-to-attention inequalities for one
/// `(q, q', K)` instance. Each pair is oriented so that it holds when
/// `lhs <= rhs`; for the similarity lower bound this means `lhs2` is the
/// bound and `rhs2` the measured total-variation similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub sim_q: f64,
    pub k_max: f64,
    pub d_k: usize,
    pub q_norm: f64,
    pub q2_norm: f64,
    /// `‖α − α'‖₁ ≤ K_max·√(2(1−sim))/√d_k`
    pub lhs1: f64,
    pub rhs1: f64,
    /// `1 − K_max·√(2(1−sim))/(2√d_k) ≤ sim_tv(α, α')`
    pub lhs2: f64,
    pub rhs2: f64,
    /// `max_j |s_j − s'_j| ≤ K_max·√(2(1−sim))/√d_k`
    pub lhs4: f64,
    pub rhs4: f64,
    /// `‖α − α'‖₁ ≤ K_max·√(2(1−sim))/√d_k`, after the softmax Lipschitz step
    pub lhs5: f64,
    pub rhs5: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn pairs(&self) -> [(f64, f64); 4] {
        [
            (self.lhs1, self.rhs1),
            (self.lhs2, self.rhs2),
            (self.lhs4, self.rhs4),
            (self.lhs5, self.rhs5),
        ]
    }
}

/// Evaluates the bounds after normalizing both queries to unit length.
pub fn verify_bounds(q: &[f64], q2: &[f64], keys: &Matrix, d_k: usize) -> Result<BoundReport> {
    if q.len() != q2.len() || q.len() != d_k || keys.cols() != d_k {
        return Err(invalid_dim("q, q' and keys must all have d_k columns"));
    }
    if keys.rows() == 0 {
        return Err(invalid_dim("no keys"));
    }
    let (u, q_norm) = normalize(q)?;
    let (u2, q2_norm) = normalize(q2)?;
    let sim_q = dot(&u, &u2).clamp(-1.0, 1.0);
    let k_max = keys.iter_rows().map(l2_norm).fold(0.0, f64::max);
    let scale = 1.0 / (d_k as f64).sqrt();

    let s: Vec<f64> = keys.iter_rows().map(|k| dot(&u, k) * scale).collect();
    let s2: Vec<f64> = keys.iter_rows().map(|k| dot(&u2, k) * scale).collect();
    let alpha = softmax_unchecked(&s);
    let alpha2 = softmax_unchecked(&s2);

    let bound = k_max * (2.0 * (1.0 - sim_q)).max(0.0).sqrt() * scale;
    let l1 = vector_distance(&alpha, &alpha2, Norm::L1)?;
    let score_gap = vector_distance(&s, &s2, Norm::Linf)?;
    let tv = 1.0 - 0.5 * l1;

    let mut report = BoundReport {
        sim_q,
        k_max,
        d_k,
        q_norm,
        q2_norm,
        lhs1: l1,
        rhs1: bound,
        lhs2: 1.0 - bound / 2.0,
        rhs2: tv,
        lhs4: score_gap,
        rhs4: bound,
        lhs5: l1,
        rhs5: bound,
        holds: false,
    };
    report.holds = report.pairs().iter().all(|(l, r)| *l <= r + BOUND_SLACK);
    Ok(report)
}

/// `(‖softmax(s) − softmax(s')‖₁, ‖s − s'‖∞)`.
pub fn softmax_lipschitz(s: &[f64], s2: &[f64]) -> Result<(f64, f64)> {
    let a = crate::tensor::softmax_stable(s)?;
    let b = crate::tensor::softmax_stable(s2)?;
    Ok((
        vector_distance(&a, &b, Norm::L1)?,
        vector_distance(s, s2, Norm::Linf)?,
    ))
}

/// Total-variation similarity `1 − ½‖a − b‖₁`.
pub fn tv_similarity(a: &AttentionRow, b: &AttentionRow) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid_dim(format!("{} vs {}", a.len(), b.len())));
    }
    Ok(1.0 - 0.5 * vector_distance(a.weights(), b.weights(), Norm::L1)?)
}

// ---------------------------------------------------------------- query similarity

/// Content / position pairing of pseudo queries against the decode queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    ScSp,
    DcSp,
    ScDp,
    DcDp,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::ScSp, Condition::DcSp, Condition::ScDp, Condition::DcDp];

    pub fn name(self) -> &'static str {
        match self {
            Condition::ScSp => "SC_SP",
            Condition::DcSp => "DC_SP",
            Condition::ScDp => "SC_DP",
            Condition::DcDp => "DC_DP",
        }
    }

    fn same_content(self) -> bool {
        matches!(self, Condition::ScSp | Condition::ScDp)
    }

    fn same_position(self) -> bool {
        matches!(self, Condition::ScSp | Condition::DcSp)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['&', '-', ' '], "_");
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| invalid_config(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSimilarity {
    pub trial: usize,
    pub pre_rope: f64,
    pub post_rope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub condition: Condition,
    pub pre_rope: f64,
    pub post_rope: f64,
    pub trials: usize,
    pub per_trial: Vec<TrialSimilarity>,
    pub aggregation: &'static str,
}

/// Per-trial RNG derived from the root seed by stream splitting.
pub fn trial_rng(root_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(trial);
    rng
}

fn require_decode(layers: &[LayerData]) -> Result<usize> {
    let first = layers.first().ok_or_else(|| Error::InvalidInput("no layers".into()))?;
    let w = first.decode_len();
    if w == 0 {
        return Err(Error::MissingDecodePhase);
    }
    Ok(w)
}

/// Mean cosine between pseudo and decode query windows, before and after
/// rotation, under one content/position condition.
///
/// Different content takes the pre-rotation queries of prompt tokens drawn
/// uniformly at random. Different position assigns a consecutive span whose
/// start is drawn uniformly from `[0, L_p − W]`.
pub fn similarity_experiment(
    layers: &[LayerData],
    condition: Condition,
    trials: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    let w = require_decode(layers)?;
    if trials == 0 {
        return Err(invalid_config("trials must be >= 1"));
    }
    let lp = layers[0].prompt_len();
    let rope = Rope::new(layers[0].rope)?;
    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial as u64);
        let content: Option<Vec<usize>> =
            (!condition.same_content()).then(|| (0..w).map(|_| rng.random_range(0..lp)).collect());
        let positions: Vec<PositionId> = if condition.same_position() {
            layers[0].decode_positions.clone()
        } else {
            let start = rng.random_range(0..=lp.saturating_sub(w));
            (0..w).map(|t| PositionId((start + t) as u64)).collect()
        };

        let (mut pre, mut post, mut count) = (0.0, 0.0, 0usize);
        for layer in layers {
            for h in 0..layer.num_q_heads() {
                let gt = &layer.decode_queries[h];
                for t in 0..w {
                    let truth = gt.row(t);
                    let pseudo = match &content {
                        Some(src) => layer.queries[h].row(src[t]),
                        None => truth,
                    };
                    pre += cosine_similarity(pseudo, truth)?;
                    post += cosine_similarity(
                        &rope.apply(pseudo, positions[t])?,
                        &rope.apply(truth, layer.decode_positions[t])?,
                    )?;
                    count += 1;
                }
            }
        }
        per_trial.push(TrialSimilarity {
            trial,
            pre_rope: pre / count as f64,
            post_rope: post / count as f64,
        });
    }
    let mean = |f: fn(&TrialSimilarity) -> f64| per_trial.iter().map(f).sum::<f64>() / trials as f64;
    Ok(SimilarityReport {
        condition,
        pre_rope: mean(|t| t.pre_rope),
        post_rope: mean(|t| t.post_rope),
        trials,
        per_trial,
        aggregation: SIMILARITY_AGGREGATION,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetPoint {
    /// First position assigned to the pseudo window.
    pub start: u64,
    /// Distance from the true first decode position.
    pub abs_offset: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetCurve {
    pub points: Vec<OffsetPoint>,
    /// Spearman rank correlation between `abs_offset` and `similarity`;
    /// `None` with fewer than two points or constant inputs.
    pub spearman: Option<f64>,
    pub seed: u64,
    pub same_content: bool,
}

/// Post-rotation similarity of the decode window re-rotated to start at
/// each given position.
///
/// With `same_content` the pseudo window is the decode queries themselves;
/// otherwise each slot takes a seeded random prompt token's query.
pub fn offset_decay_curve(
    layers: &[LayerData],
    starts: &[u64],
    same_content: bool,
    seed: u64,
) -> Result<OffsetCurve> {
    let w = require_decode(layers)?;
    let lp = layers[0].prompt_len() as u64;
    if let Some(&bad) = starts.iter().find(|&&s| s > lp) {
        return Err(invalid_config(format!("offset {bad} outside [0, {lp}]")));
    }
    let rope = Rope::new(layers[0].rope)?;
    let true_start = layers[0].decode_positions[0].value();
    let mut rng = trial_rng(seed, 0);
    let content: Option<Vec<usize>> =
        (!same_content).then(|| (0..w).map(|_| rng.random_range(0..lp as usize)).collect());

    let mut points = Vec::with_capacity(starts.len());
    for &start in starts {
        let (mut sum, mut count) = (0.0, 0usize);
        for layer in layers {
            for h in 0..layer.num_q_heads() {
                for t in 0..w {
                    let truth = layer.decode_queries[h].row(t);
                    let pseudo = match &content {
                        Some(src) => layer.queries[h].row(src[t]),
                        None => truth,
                    };
                    sum += cosine_similarity(
                        &rope.apply(pseudo, PositionId(start + t as u64))?,
                        &rope.apply(truth, layer.decode_positions[t])?,
                    )?;
                    count += 1;
                }
            }
        }
        points.push(OffsetPoint {
            start,
            abs_offset: start.abs_diff(true_start),
            similarity: sum / count as f64,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.abs_offset as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.similarity).collect();
    Ok(OffsetCurve {
        spearman: spearman_rho(&xs, &ys),
        points,
        seed,
        same_content,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

// ---------------------------------------------------------------- window alignment

/// A set of queries whose aggregated attention estimates token importance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObservationWindow {
    /// Pseudo queries at future positions; the recipe is resized per window size.
    Pseudo(PseudoQuerySpec),
    /// The last `w` prompt queries under the causal mask.
    LastPrompt,
    /// All stored decode queries, whatever the window size.
    GroundTruth,
}

impl ObservationWindow {
    pub fn name(&self) -> &'static str {
        match self {
            ObservationWindow::Pseudo(_) => "dapq",
            ObservationWindow::LastPrompt => "snapkv",
            ObservationWindow::GroundTruth => "ground_truth",
        }
    }
}

/// Aggregated window attention over prompt keys, one vector per KV head.
pub fn window_attention(
    layer: &LayerData,
    window: &ObservationWindow,
    size: usize,
    cfg: &PolicyConfig,
) -> Result<Vec<Vec<f64>>> {
    let lp = layer.prompt_len();
    if size == 0 || size > lp {
        return Err(invalid_config(format!("window size {size} must be in [1, {lp}]")));
    }
    match window {
        ObservationWindow::GroundTruth => decode_attention(layer),
        ObservationWindow::Pseudo(spec) => {
            let cfg = PolicyConfig {
                dapq_pooling: false,
                ..cfg.clone()
            };
            Ok(dapq_scores(layer, &spec.resized(size), &cfg)?
                .into_iter()
                .map(|s| s.scores)
                .collect())
        }
        ObservationWindow::LastPrompt => {
            let rope = Rope::new(layer.rope)?;
            let d = layer.head_dim();
            Ok((0..layer.num_kv_heads())
                .map(|kv| {
                    let keys = rope.apply_rows(layer.keys[kv].as_slice(), &layer.prompt_positions);
                    let mut total = vec![0.0; lp];
                    for h in layer.q_heads_of(kv) {
                        let q = rope.apply_rows(layer.queries[h].as_slice(), &layer.prompt_positions);
                        let s = crate::attention::causal_column_sums(&q, &keys, d, lp - size..lp, false);
                        for (a, b) in total.iter_mut().zip(&s) {
                            *a += b;
                        }
                    }
                    total
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentRow {
    pub window_size: usize,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTable {
    pub window_a: &'static str,
    pub window_b: &'static str,
    pub rows: Vec<AlignmentRow>,
}

/// Cosine between each window's aggregated attention and the decode
/// queries' aggregated attention, averaged over layers and KV heads.
pub fn window_attention_alignment(
    layers: &[LayerData],
    window_a: &ObservationWindow,
    window_b: &ObservationWindow,
    sizes: &[usize],
    cfg: &PolicyConfig,
) -> Result<AlignmentTable> {
    require_decode(layers)?;
    let lp = layers[0].prompt_len();
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > lp) {
        return Err(invalid_config(format!("window size {bad} must be in [1, {lp}]")));
    }
    let truth: Vec<Vec<Vec<f64>>> = layers.iter().map(decode_attention).collect::<Result<_>>()?;
    let mean_cos = |win: &ObservationWindow, size: usize| -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (layer, gt) in layers.iter().zip(&truth) {
            let est = window_attention(layer, win, size, cfg)?;
            for (e, g) in est.iter().zip(gt) {
                sum += cosine_similarity(e, g)?;
                n += 1;
            }
        }
        Ok(sum / n as f64)
    };
    let rows = sizes
        .iter()
        .map(|&size| {
            Ok(AlignmentRow {
                window_size: size,
                a: mean_cos(window_a, size)?,
                b: mean_cos(window_b, size)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AlignmentTable {
        window_a: window_a.name(),
        window_b: window_b.name(),
        rows,
    })
}
