//! Scaled dot-product attention rows, observation-window importance
//! accumulation and 1-D score pooling.

use crate::error::{invalid_config, invalid_dim, Error, Result};
use crate::rope::{PositionId, Rope};
use crate::tensor::{dot, softmax_unchecked, Matrix};

/// Normalized attention weights of one query over its visible keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow(Vec<f64>);

impl AttentionRow {
    /// Wraps weights that are already a probability vector.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid_dim("empty attention row"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFiniteInput("attention weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("attention row sums to {sum}")));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-token importance over the prompt for one (layer, KV head).
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub layer: usize,
    pub head: usize,
}

impl ImportanceScores {
    pub fn new(scores: Vec<f64>) -> Self {
        Self {
            scores,
            layer: 0,
            head: 0,
        }
    }

    pub fn tagged(mut self, layer: usize, head: usize) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Elementwise sum, used to fold query heads that share one KV head.
    pub fn add_assign(&mut self, other: &ImportanceScores) {
        for (a, b) in self.scores.iter_mut().zip(&other.scores) {
            *a += b;
        }
    }
}

/// Which keys a pseudo query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VisibilityRule {
    /// Prompt keys only.
    PromptOnly,
    /// Prompt keys plus the pseudo keys up to and including the query's own
    /// slot, as under a causal mask over the extended sequence.
    #[default]
    PromptPlusPrecedingPseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Max,
    Avg,
}

/// A query vector (pre-rotation) together with the position it is rotated to.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionedQuery {
    pub vector: Vec<f64>,
    pub position: PositionId,
}

impl PositionedQuery {
    pub fn new(vector: Vec<f64>, position: PositionId) -> Self {
        Self { vector, position }
    }
}

/// `softmax(q K^T / sqrt(d_k))` over every row of `keys`.
pub fn attention_row(q: &[f64], keys: &Matrix, d_k: usize) -> Result<AttentionRow> {
    if keys.rows() == 0 {
        return Err(invalid_dim("attention over zero keys"));
    }
    if q.len() != d_k || keys.cols() != d_k {
        return Err(invalid_dim(format!(
            "query dim {}, key dim {}, d_k {d_k}",
            q.len(),
            keys.cols()
        )));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * scale).collect();
    Ok(AttentionRow(softmax_unchecked(&logits)))
}

/// How many prompt keys a window may see and how pseudo keys are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowVisibility {
    pub prompt_len: usize,
    /// Prompt keys `[0, visible_prompt)` are visible; the rest are masked.
    pub visible_prompt: usize,
    pub rule: VisibilityRule,
}

impl WindowVisibility {
    pub fn full(prompt_len: usize, rule: VisibilityRule) -> Self {
        Self {
            prompt_len,
            visible_prompt: prompt_len,
            rule,
        }
    }
}

/// Sums each window query's softmax row over the prompt columns.
///
/// Queries and keys are rotated to their positions first. Rows
/// `prompt_len..` of `keys` are the pseudo keys, one per query in window
/// order; they are only read under
/// [`VisibilityRule::PromptPlusPrecedingPseudo`].
pub fn accumulate_importance(
    window: &[PositionedQuery],
    keys: &Matrix,
    key_positions: &[PositionId],
    prompt_len: usize,
    rule: VisibilityRule,
    rope: &Rope,
) -> Result<ImportanceScores> {
    accumulate_importance_masked(
        window,
        keys,
        key_positions,
        WindowVisibility::full(prompt_len, rule),
        rope,
    )
}

/// [`accumulate_importance`] with the visible prompt prefix truncated.
pub fn accumulate_importance_masked(
    window: &[PositionedQuery],
    keys: &Matrix,
    key_positions: &[PositionId],
    vis: WindowVisibility,
    rope: &Rope,
) -> Result<ImportanceScores> {
    let d = rope.head_dim();
    let lp = vis.prompt_len;
    if keys.cols() != d {
        return Err(invalid_dim(format!("keys have {} cols, head_dim {d}", keys.cols())));
    }
    if key_positions.len() != keys.rows() {
        return Err(invalid_dim(format!(
            "{} key positions for {} keys",
            key_positions.len(),
            keys.rows()
        )));
    }
    if keys.rows() < lp {
        return Err(invalid_dim(format!("{} keys for prompt length {lp}", keys.rows())));
    }
    if vis.visible_prompt > lp {
        return Err(invalid_config("visible prompt prefix exceeds prompt length"));
    }
    let with_pseudo = vis.rule == VisibilityRule::PromptPlusPrecedingPseudo;
    if with_pseudo && keys.rows() < lp + window.len() {
        return Err(Error::MissingPseudoKeys {
            needed: lp + window.len(),
            provided: keys.rows(),
        });
    }
    if !with_pseudo && vis.visible_prompt == 0 && !window.is_empty() {
        return Err(invalid_config("window sees no keys"));
    }
    if let Some(q) = window.iter().find(|q| q.vector.len() != d) {
        return Err(invalid_dim(format!("query has {} dims, head_dim {d}", q.vector.len())));
    }

    let rotated = rope.apply_rows(keys.as_slice(), key_positions);
    let key = |j: usize| &rotated[j * d..(j + 1) * d];
    let scale = 1.0 / (d as f64).sqrt();

    let mut scores = vec![0.0; lp];
    let mut logits = Vec::with_capacity(vis.visible_prompt + window.len());
    for (i, wq) in window.iter().enumerate() {
        let q = rope.apply(&wq.vector, wq.position)?;
        logits.clear();
        logits.extend((0..vis.visible_prompt).map(|j| dot(&q, key(j)) * scale));
        if with_pseudo {
            logits.extend((lp..=lp + i).map(|j| dot(&q, key(j)) * scale));
        }
        let row = softmax_unchecked(&logits);
        for (s, w) in scores.iter_mut().zip(&row[..vis.visible_prompt]) {
            *s += w;
        }
    }
    Ok(ImportanceScores::new(scores))
}

/// Column sums of causal prompt attention restricted to the given query rows.
///
/// Query `i` (a prompt index) attends to keys `[0, i]`. `queries` and `keys`
/// are already rotated, `[tokens][head_dim]` row-major. When
/// `normalize_by_count` is set, column `j` is divided by the number of rows
/// that could see it.
pub(crate) fn causal_column_sums(
    queries: &[f64],
    keys: &[f64],
    head_dim: usize,
    query_rows: std::ops::Range<usize>,
    normalize_by_count: bool,
) -> Vec<f64> {
    let d = head_dim;
    let n = keys.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut sums = vec![0.0; n];
    let mut logits = Vec::with_capacity(n);
    for i in query_rows.clone() {
        let q = &queries[i * d..(i + 1) * d];
        logits.clear();
        logits.extend((0..=i).map(|j| dot(q, &keys[j * d..(j + 1) * d]) * scale));
        let row = softmax_unchecked(&logits);
        for (s, w) in sums.iter_mut().zip(&row) {
            *s += w;
        }
    }
    if normalize_by_count {
        for (j, s) in sums.iter_mut().enumerate() {
            let first = query_rows.start.max(j);
            let count = query_rows.end.saturating_sub(first);
            if count > 0 {
                *s /= count as f64;
            }
        }
    }
    sums
}

/// Same-length 1-D pooling with edge replication padding.
pub fn pool_scores(s: &ImportanceScores, kernel: usize, mode: PoolMode) -> Result<ImportanceScores> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(invalid_config(format!("pooling kernel must be odd, got {kernel}")));
    }
    let n = s.scores.len();
    if kernel == 1 || n == 0 {
        return Ok(s.clone());
    }
    let half = (kernel / 2) as isize;
    let at = |i: isize| s.scores[i.clamp(0, n as isize - 1) as usize];
    let pooled = (0..n as isize)
        .map(|c| {
            let window = (c - half..=c + half).map(at);
            match mode {
                PoolMode::Max => window.fold(f64::NEG_INFINITY, f64::max),
                PoolMode::Avg => window.sum::<f64>() / kernel as f64,
            }
        })
        .collect();
    Ok(ImportanceScores {
        scores: pooled,
        layer: s.layer,
        head: s.head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeConfig;

    fn rope(d: usize) -> Rope {
        Rope::new(RopeConfig::new(d)).unwrap()
    }

    #[test]
    fn attention_row_examples() {
        let one = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        assert_eq!(attention_row(&[1.0, 2.0], &one, 2).unwrap().weights(), &[1.0]);

        let twins = Matrix::from_rows(&[[0.3, -0.2], [0.3, -0.2]]).unwrap();
        assert_eq!(attention_row(&[1.0, 2.0], &twins, 2).unwrap().weights(), &[0.5, 0.5]);

        let keys = Matrix::from_rows(&[[0.0, 1.0], [0.0, -3.0], [0.0, 7.0]]).unwrap();
        let row = attention_row(&[2.0, 0.0], &keys, 2).unwrap();
        for w in row.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let empty = Matrix::new(0, 2, vec![]).unwrap();
        assert!(attention_row(&[1.0, 0.0], &empty, 2).is_err());
    }

    #[test]
    fn single_query_prompt_only_is_its_row() {
        let r = rope(2);
        let keys = Matrix::from_rows(&[[1.0, 0.5], [-0.3, 0.8], [0.9, -1.1]]).unwrap();
        let pos: Vec<PositionId> = (0..3usize).map(PositionId::from).collect();
        let q = PositionedQuery::new(vec![0.7, -0.4], PositionId(3));
        let s = accumulate_importance(std::slice::from_ref(&q), &keys, &pos, 3, VisibilityRule::PromptOnly, &r).unwrap();

        let rotated_keys: Vec<Vec<f64>> = (0..3)
            .map(|j| r.apply(keys.row(j), pos[j]).unwrap())
            .collect();
        let expected = attention_row(
            &r.apply(&q.vector, q.position).unwrap(),
            &Matrix::from_rows(&rotated_keys).unwrap(),
            2,
        )
        .unwrap();
        for (a, b) in s.scores.iter().zip(expected.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_queries_give_uniform_scores() {
        let r = rope(4);
        let keys = Matrix::from_rows(&[[1., 2., 3., 4.], [0.5, 0., -1., 2.], [3., 3., 3., 3.], [-1., 0., 0., 1.]]).unwrap();
        let pos: Vec<PositionId> = (0..4usize).map(PositionId::from).collect();
        let window: Vec<_> = (0..3)
            .map(|i| PositionedQuery::new(vec![0.0; 4], PositionId(4 + i)))
            .collect();
        let s = accumulate_importance(&window, &keys, &pos, 4, VisibilityRule::PromptOnly, &r).unwrap();
        for v in &s.scores {
            assert!((v - 3.0 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pseudo_keys_required_for_causal_rule() {
        let r = rope(2);
        let keys = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let pos = [PositionId(0), PositionId(1)];
        let window = [PositionedQuery::new(vec![1.0, 1.0], PositionId(2))];
        let err = accumulate_importance(&window, &keys, &pos, 2, VisibilityRule::PromptPlusPrecedingPseudo, &r)
            .unwrap_err();
        assert!(matches!(err, Error::MissingPseudoKeys { needed: 3, provided: 2 }));
    }

    #[test]
    fn causal_rule_leaks_mass_to_pseudo_keys() {
        let r = rope(2);
        let keys = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.2, 0.9]]).unwrap();
        let pos: Vec<PositionId> = (0..4usize).map(PositionId::from).collect();
        let window = [
            PositionedQuery::new(vec![1.0, 1.0], PositionId(2)),
            PositionedQuery::new(vec![-1.0, 0.3], PositionId(3)),
        ];
        let s = accumulate_importance(&window, &keys, &pos, 2, VisibilityRule::PromptPlusPrecedingPseudo, &r).unwrap();
        let total: f64 = s.scores.iter().sum();
        assert!(total < 2.0 && total > 0.0);
    }

    #[test]
    fn masked_prefix_gets_no_mass() {
        let r = rope(2);
        let keys = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap();
        let pos: Vec<PositionId> = (0..3usize).map(PositionId::from).collect();
        let window = [PositionedQuery::new(vec![1.0, 1.0], PositionId(1))];
        let vis = WindowVisibility {
            prompt_len: 3,
            visible_prompt: 1,
            rule: VisibilityRule::PromptOnly,
        };
        let s = accumulate_importance_masked(&window, &keys, &pos, vis, &r).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_examples() {
        let s = ImportanceScores::new(vec![0.0, 5.0, 0.0, 0.0]);
        assert_eq!(pool_scores(&s, 1, PoolMode::Max).unwrap(), s);
        assert_eq!(pool_scores(&s, 3, PoolMode::Max).unwrap().scores, vec![5.0, 5.0, 5.0, 0.0]);
        let t = ImportanceScores::new(vec![0.0, 6.0, 0.0]);
        assert_eq!(pool_scores(&t, 3, PoolMode::Avg).unwrap().scores, vec![2.0, 2.0, 2.0]);
        assert!(matches!(pool_scores(&s, 4, PoolMode::Max), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn causal_sums_normalization() {
        // keys identical -> row i is uniform over i+1 keys
        let q = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let k = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let raw = causal_column_sums(&q, &k, 2, 0..3, false);
        let expected = [1.0 + 0.5 + 1.0 / 3.0, 0.5 + 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in raw.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let norm = causal_column_sums(&q, &k, 2, 0..3, true);
        assert!((norm[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!((norm[0] - expected[0] / 3.0).abs() < 1e-15);
    }
}
