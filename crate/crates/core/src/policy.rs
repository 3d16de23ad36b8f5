//! Token eviction policies.
//!
//! Every selector works on one layer and returns one retained index set per
//! KV head. Query heads that share a KV head have their scores summed before
//! selection.
//!
//! [`select_dapq`] appends `N` pseudo tokens after the prompt, rotates their
//! queries to the positions the first `N` decode steps will occupy, and keeps
//! the top-`B` prompt tokens by accumulated attention from those queries. The
//! pseudo tokens never enter the retained set.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    accumulate_importance_masked, causal_column_sums, pool_scores, ImportanceScores, PoolMode,
    PositionedQuery, VisibilityRule, WindowVisibility,
};
use crate::error::{invalid_config, Error, Result};
use crate::layer::LayerData;
use crate::rope::{PositionId, Rope};
use crate::tensor::{top_k_indices, IndexSet, Matrix};

/// Where the content (pre-rotation query/key rows) of pseudo tokens comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentStrategy {
    /// First `first` and last `last` prompt tokens, concatenated.
    FmLn { first: usize, last: usize },
    /// `N` individually sampled prompt tokens, kept in prompt order.
    RandomScattered { seed: u64 },
    /// A random consecutive span of `N` prompt tokens.
    RandomConsecutive { seed: u64 },
    /// A fixed token-id sequence, cycled or truncated to `N`. Each id takes
    /// the content of its last occurrence in the prompt.
    Fixed { token_ids: Vec<u32> },
}

impl fmt::Display for ContentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContentStrategy::FmLn { first, last } => write!(f, "fm_ln:{first},{last}"),
            ContentStrategy::RandomScattered { seed } => write!(f, "rs_c:{seed}"),
            ContentStrategy::RandomConsecutive { seed } => write!(f, "rc_c:{seed}"),
            ContentStrategy::Fixed { token_ids } => {
                let ids: Vec<String> = token_ids.iter().map(u32::to_string).collect();
                write!(f, "fix_c:{}", ids.join(","))
            }
        }
    }
}

impl FromStr for ContentStrategy {
    type Err = Error;

    /// Parses `fm_ln:M,N`, `rs_c:SEED`, `rc_c:SEED` or `fix_c:ID,ID,...`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid_config(format!("unrecognized pseudo content strategy {s:?}"));
        let (name, args) = s.trim().split_once(':').ok_or_else(bad)?;
        let nums = |args: &str| -> Result<Vec<u64>> {
            args.split(',')
                .map(|a| a.trim().parse::<u64>().map_err(|_| bad()))
                .collect()
        };
        match name.trim().to_ascii_lowercase().as_str() {
            "fm_ln" | "fmln" => match nums(args)?.as_slice() {
                &[m, n] => Ok(ContentStrategy::FmLn {
                    first: usize::try_from(m).map_err(|_| bad())?,
                    last: usize::try_from(n).map_err(|_| bad())?,
                }),
                _ => Err(bad()),
            },
            "rs_c" | "rsc" => match nums(args)?.as_slice() {
                &[seed] => Ok(ContentStrategy::RandomScattered { seed }),
                _ => Err(bad()),
            },
            "rc_c" | "rcc" => match nums(args)?.as_slice() {
                &[seed] => Ok(ContentStrategy::RandomConsecutive { seed }),
                _ => Err(bad()),
            },
            "fix_c" | "fixc" => {
                let ids = nums(args)?
                    .into_iter()
                    .map(|v| u32::try_from(v).map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                if ids.is_empty() {
                    return Err(bad());
                }
                Ok(ContentStrategy::Fixed { token_ids: ids })
            }
            _ => Err(bad()),
        }
    }
}

/// Construction recipe for the pseudo-query window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoQuerySpec {
    pub len: usize,
    pub strategy: ContentStrategy,
    /// Added to every assigned position.
    pub position_offset: i64,
    /// Anchor the window at this prompt index instead of after the prompt.
    /// Queries then only see prompt keys `[0, insert_index)`.
    pub insert_index: Option<usize>,
}

impl Default for PseudoQuerySpec {
    fn default() -> Self {
        Self {
            len: 32,
            strategy: ContentStrategy::FmLn { first: 4, last: 28 },
            position_offset: 0,
            insert_index: None,
        }
    }
}

impl PseudoQuerySpec {
    pub fn new(len: usize, strategy: ContentStrategy) -> Self {
        Self {
            len,
            strategy,
            ..Self::default()
        }
    }

    /// The same recipe at a different window length. `FmLn` keeps its head
    /// count (clamped to `len`) and fills the rest from the tail.
    pub fn resized(&self, len: usize) -> Self {
        let strategy = match &self.strategy {
            ContentStrategy::FmLn { first, .. } => {
                let first = (*first).min(len);
                ContentStrategy::FmLn {
                    first,
                    last: len - first,
                }
            }
            other => other.clone(),
        };
        Self {
            len,
            strategy,
            ..self.clone()
        }
    }
}

/// Resolved pseudo window: which prompt token supplies each slot's content,
/// the position each slot is rotated to, and how much prompt it may see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoWindow {
    pub sources: Vec<usize>,
    pub positions: Vec<PositionId>,
    pub visible_prompt: usize,
}

pub fn build_pseudo_window(token_ids: &[u32], spec: &PseudoQuerySpec) -> Result<PseudoWindow> {
    let lp = token_ids.len();
    let n = spec.len;
    if n == 0 {
        return Err(invalid_config("pseudo window length must be >= 1"));
    }
    if lp == 0 {
        return Err(invalid_config("empty prompt"));
    }
    let anchor = match spec.insert_index {
        Some(t) if t > lp => {
            return Err(invalid_config(format!("insert index {t} exceeds prompt length {lp}")))
        }
        Some(t) => t,
        None => lp,
    };
    let sources = match &spec.strategy {
        ContentStrategy::FmLn { first, last } => {
            if first.checked_add(*last) != Some(n) {
                return Err(invalid_config(format!(
                    "fm_ln:{first},{last} does not sum to window length {n}"
                )));
            }
            if *first > lp || *last > lp {
                return Err(invalid_config(format!(
                    "fm_ln:{first},{last} needs at least {} prompt tokens",
                    first.max(last)
                )));
            }
            (0..*first).chain(lp - last..lp).collect()
        }
        ContentStrategy::RandomScattered { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut picked: Vec<usize> = if n <= lp {
                index::sample(&mut rng, lp, n).into_vec()
            } else {
                (0..n).map(|_| rng.random_range(0..lp)).collect()
            };
            picked.sort_unstable();
            picked
        }
        ContentStrategy::RandomConsecutive { seed } => {
            if n > lp {
                return Err(invalid_config(format!(
                    "consecutive span of {n} exceeds prompt length {lp}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let start = rng.random_range(0..=lp - n);
            (start..start + n).collect()
        }
        ContentStrategy::Fixed { token_ids: ids } => {
            if ids.is_empty() {
                return Err(invalid_config("fixed content needs at least one token id"));
            }
            let lookup = |id: u32| {
                token_ids
                    .iter()
                    .rposition(|&t| t == id)
                    .ok_or_else(|| invalid_config(format!("token id {id} does not occur in the prompt")))
            };
            ids.iter().cycle().take(n).map(|&id| lookup(id)).collect::<Result<_>>()?
        }
    };
    let start = anchor as i64 + spec.position_offset;
    if start < 0 {
        return Err(invalid_config(format!("pseudo positions start at negative index {start}")));
    }
    let positions = (0..n).map(|i| PositionId(start as u64 + i as u64)).collect();
    Ok(PseudoWindow {
        sources,
        positions,
        visible_prompt: anchor,
    })
}

/// Materializes pseudo queries from a head's pre-rotation prompt rows.
pub fn build_pseudo_queries(
    prompt_rows: &Matrix,
    token_ids: &[u32],
    spec: &PseudoQuerySpec,
) -> Result<Vec<PositionedQuery>> {
    if prompt_rows.rows() != token_ids.len() {
        return Err(Error::InvalidDimension(format!(
            "{} content rows for {} prompt tokens",
            prompt_rows.rows(),
            token_ids.len()
        )));
    }
    let w = build_pseudo_window(token_ids, spec)?;
    Ok(w.sources
        .iter()
        .zip(&w.positions)
        .map(|(&s, &p)| PositionedQuery::new(prompt_rows.row(s).to_vec(), p))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheBudget(usize);

impl CacheBudget {
    pub fn new(tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(invalid_config("cache budget must be >= 1"));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    DapQ,
    SnapKV,
    /// SnapKV scoring under a depth-decreasing per-layer budget schedule.
    PyramidKV,
    H2O,
    StreamingLLM,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::DapQ,
        PolicyKind::SnapKV,
        PolicyKind::PyramidKV,
        PolicyKind::H2O,
        PolicyKind::StreamingLLM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::DapQ => "dapq",
            PolicyKind::SnapKV => "snapkv",
            PolicyKind::PyramidKV => "pyramidkv",
            PolicyKind::H2O => "h2o",
            PolicyKind::StreamingLLM => "streamingllm",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dapq" => Ok(PolicyKind::DapQ),
            "snapkv" => Ok(PolicyKind::SnapKV),
            "pyramidkv" | "pyramid" => Ok(PolicyKind::PyramidKV),
            "h2o" => Ok(PolicyKind::H2O),
            "streamingllm" | "streaming" | "slm" => Ok(PolicyKind::StreamingLLM),
            other => Err(invalid_config(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Observation window for SnapKV/PyramidKV; default recency window.
    pub window: usize,
    pub pool_kernel: usize,
    pub pool_mode: PoolMode,
    pub sink_size: usize,
    /// Recency window for H2O; `None` means `window`.
    pub recent_size: Option<usize>,
    pub visibility: VisibilityRule,
    pub pseudo: PseudoQuerySpec,
    /// Apply the SnapKV pooling to DapQ scores too.
    pub dapq_pooling: bool,
    /// Divide H2O cumulative scores by the number of queries that saw each token.
    pub h2o_normalize: bool,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            window: 32,
            pool_kernel: 7,
            pool_mode: PoolMode::Max,
            sink_size: 4,
            recent_size: None,
            visibility: VisibilityRule::PromptPlusPrecedingPseudo,
            pseudo: PseudoQuerySpec::default(),
            dapq_pooling: false,
            h2o_normalize: false,
        }
    }

    pub fn recent(&self) -> usize {
        self.recent_size.unwrap_or(self.window)
    }
}

/// Retained prompt indices for every KV head of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEviction {
    pub layer: usize,
    pub budget: usize,
    pub retained: Vec<IndexSet>,
}

impl LayerEviction {
    fn all(layer: &LayerData, budget: usize) -> Self {
        let all = IndexSet::range(0, layer.prompt_len());
        Self {
            layer: layer.layer,
            budget,
            retained: vec![all; layer.num_kv_heads()],
        }
    }

    /// Slots actually used, summed over heads.
    pub fn budget_used(&self) -> usize {
        self.retained.iter().map(IndexSet::len).sum()
    }
}

/// DapQ importance scores per KV head (query heads of a group summed).
pub fn dapq_scores(
    layer: &LayerData,
    spec: &PseudoQuerySpec,
    cfg: &PolicyConfig,
) -> Result<Vec<ImportanceScores>> {
    let window = build_pseudo_window(&layer.token_ids, spec)?;
    let rope = Rope::new(layer.rope)?;
    let lp = layer.prompt_len();
    let vis = WindowVisibility {
        prompt_len: lp,
        visible_prompt: window.visible_prompt,
        rule: cfg.visibility,
    };

    let mut key_positions = layer.prompt_positions.clone();
    if cfg.visibility == VisibilityRule::PromptPlusPrecedingPseudo {
        key_positions.extend_from_slice(&window.positions);
    }

    (0..layer.num_kv_heads())
        .map(|kv| {
            let keys = with_pseudo_rows(&layer.keys[kv], &window.sources, cfg.visibility)?;
            let mut total = ImportanceScores::new(vec![0.0; lp]).tagged(layer.layer, kv);
            for h in layer.q_heads_of(kv) {
                let queries: Vec<PositionedQuery> = window
                    .sources
                    .iter()
                    .zip(&window.positions)
                    .map(|(&s, &p)| PositionedQuery::new(layer.queries[h].row(s).to_vec(), p))
                    .collect();
                let s = accumulate_importance_masked(&queries, &keys, &key_positions, vis, &rope)?;
                total.add_assign(&s);
            }
            if cfg.dapq_pooling {
                total = pool_scores(&total, cfg.pool_kernel, cfg.pool_mode)?;
            }
            Ok(total)
        })
        .collect()
}

fn with_pseudo_rows(prompt: &Matrix, sources: &[usize], rule: VisibilityRule) -> Result<Matrix> {
    if rule == VisibilityRule::PromptOnly {
        return Ok(prompt.clone());
    }
    let mut data = prompt.as_slice().to_vec();
    for &s in sources {
        data.extend_from_slice(prompt.row(s));
    }
    Matrix::new(prompt.rows() + sources.len(), prompt.cols(), data)
}

pub fn select_dapq(
    layer: &LayerData,
    spec: &PseudoQuerySpec,
    budget: CacheBudget,
    cfg: &PolicyConfig,
) -> Result<LayerEviction> {
    let b = budget.tokens();
    let scores = dapq_scores(layer, spec, cfg)?;
    if b >= layer.prompt_len() {
        return Ok(LayerEviction::all(layer, b));
    }
    Ok(LayerEviction {
        layer: layer.layer,
        budget: b,
        retained: scores.iter().map(|s| top_k_indices(&s.scores, b)).collect(),
    })
}

/// Causal prompt-attention column sums per KV head, over query rows `rows`.
fn causal_scores(
    layer: &LayerData,
    rows: std::ops::Range<usize>,
    normalize: bool,
) -> Result<Vec<Vec<f64>>> {
    let rope = Rope::new(layer.rope)?;
    let d = layer.head_dim();
    (0..layer.num_kv_heads())
        .map(|kv| {
            let keys = rope.apply_rows(layer.keys[kv].as_slice(), &layer.prompt_positions);
            let mut sums = vec![0.0; layer.prompt_len()];
            for h in layer.q_heads_of(kv) {
                let q = rope.apply_rows(layer.queries[h].as_slice(), &layer.prompt_positions);
                let s = causal_column_sums(&q, &keys, d, rows.clone(), normalize);
                for (a, b) in sums.iter_mut().zip(&s) {
                    *a += b;
                }
            }
            Ok(sums)
        })
        .collect()
}

/// Pooled SnapKV scores over the prefix `[0, L_p - W)` per KV head.
pub fn snapkv_scores(layer: &LayerData, cfg: &PolicyConfig) -> Result<Vec<ImportanceScores>> {
    let (lp, w) = (layer.prompt_len(), cfg.window);
    if w == 0 || w > lp {
        return Err(invalid_config(format!("observation window {w} must be in [1, {lp}]")));
    }
    causal_scores(layer, lp - w..lp, false)?
        .into_iter()
        .enumerate()
        .map(|(kv, mut s)| {
            s.truncate(lp - w);
            let s = ImportanceScores::new(s).tagged(layer.layer, kv);
            pool_scores(&s, cfg.pool_kernel, cfg.pool_mode)
        })
        .collect()
}

pub fn select_snapkv(layer: &LayerData, budget: CacheBudget, cfg: &PolicyConfig) -> Result<LayerEviction> {
    let (lp, w, b) = (layer.prompt_len(), cfg.window, budget.tokens());
    if w > b {
        return Err(invalid_config(format!("observation window {w} exceeds budget {b}")));
    }
    if cfg.pool_kernel.is_multiple_of(2) {
        return Err(invalid_config(format!("pooling kernel must be odd, got {}", cfg.pool_kernel)));
    }
    if b >= lp {
        return Ok(LayerEviction::all(layer, b));
    }
    let recent = IndexSet::range(lp - w, lp);
    let retained = snapkv_scores(layer, cfg)?
        .iter()
        .map(|s| top_k_indices(&s.scores, b - w).union(&recent))
        .collect();
    Ok(LayerEviction {
        layer: layer.layer,
        budget: b,
        retained,
    })
}

/// H2O cumulative prefill attention per KV head over all prompt tokens.
pub fn h2o_scores(layer: &LayerData, cfg: &PolicyConfig) -> Result<Vec<ImportanceScores>> {
    Ok(causal_scores(layer, 0..layer.prompt_len(), cfg.h2o_normalize)?
        .into_iter()
        .enumerate()
        .map(|(kv, s)| ImportanceScores::new(s).tagged(layer.layer, kv))
        .collect())
}

pub fn select_h2o(layer: &LayerData, budget: CacheBudget, cfg: &PolicyConfig) -> Result<LayerEviction> {
    let (lp, r, b) = (layer.prompt_len(), cfg.recent(), budget.tokens());
    if r > b {
        return Err(invalid_config(format!("recent window {r} exceeds budget {b}")));
    }
    if b >= lp {
        return Ok(LayerEviction::all(layer, b));
    }
    let recent = IndexSet::range(lp - r, lp);
    let retained = h2o_scores(layer, cfg)?
        .iter()
        .map(|s| top_k_indices(&s.scores[..lp - r], b - r).union(&recent))
        .collect();
    Ok(LayerEviction {
        layer: layer.layer,
        budget: b,
        retained,
    })
}

/// Attention sinks plus the most recent tokens; the same set for every head.
pub fn select_streaming(prompt_len: usize, budget: CacheBudget, cfg: &PolicyConfig) -> Result<IndexSet> {
    let (b, sink) = (budget.tokens(), cfg.sink_size);
    if sink >= b {
        return Err(invalid_config(format!("sink size {sink} must be below budget {b}")));
    }
    if b >= prompt_len {
        return Ok(IndexSet::range(0, prompt_len));
    }
    Ok(IndexSet::range(0, sink).union(&IndexSet::range(prompt_len - (b - sink), prompt_len)))
}

/// Linearly decreasing per-layer budgets averaging `budget`.
///
/// The schedule runs from `2B - beta` at layer 0 down to `beta` at the last
/// layer, with `beta = W + (B - W) / 20`. Integer rounding leaves a
/// remainder smaller than `num_layers`, handed out one token at a time from
/// layer 0 so the schedule stays non-increasing.
pub fn allocate_pyramid_budgets(budget: usize, num_layers: usize, window: usize) -> Result<Vec<usize>> {
    if num_layers == 0 {
        return Err(invalid_config("num_layers must be >= 1"));
    }
    if budget == 0 {
        return Err(invalid_config("cache budget must be >= 1"));
    }
    let floor = window.max(1);
    if budget < floor {
        return Err(invalid_config(format!("budget {budget} below observation window {window}")));
    }
    if num_layers == 1 {
        return Ok(vec![budget]);
    }
    let beta = floor + (budget - floor) / 20;
    let span = 2 * (budget - beta);
    let steps = num_layers - 1;
    let mut out: Vec<usize> = (0..num_layers)
        .map(|l| beta + (steps - l) * span / steps)
        .collect();
    let total: usize = out.iter().sum();
    let remainder = budget * num_layers - total;
    debug_assert!(remainder < num_layers);
    for b in out.iter_mut().take(remainder) {
        *b += 1;
    }
    Ok(out)
}

/// Runs `cfg.kind` on one layer at the given per-layer budget.
pub fn select_layer(layer: &LayerData, budget: CacheBudget, cfg: &PolicyConfig) -> Result<LayerEviction> {
    match cfg.kind {
        PolicyKind::DapQ => select_dapq(layer, &cfg.pseudo, budget, cfg),
        PolicyKind::SnapKV | PolicyKind::PyramidKV => select_snapkv(layer, budget, cfg),
        PolicyKind::H2O => select_h2o(layer, budget, cfg),
        PolicyKind::StreamingLLM => {
            let set = select_streaming(layer.prompt_len(), budget, cfg)?;
            Ok(LayerEviction {
                layer: layer.layer,
                budget: budget.tokens(),
                retained: vec![set; layer.num_kv_heads()],
            })
        }
    }
}

/// Per-layer budgets for `cfg.kind`: the pyramid schedule for PyramidKV,
/// uniform otherwise.
pub fn layer_budgets(cfg: &PolicyConfig, budget: CacheBudget, num_layers: usize) -> Result<Vec<CacheBudget>> {
    let raw = match cfg.kind {
        PolicyKind::PyramidKV => allocate_pyramid_budgets(budget.tokens(), num_layers, cfg.window)?,
        _ => vec![budget.tokens(); num_layers],
    };
    raw.into_iter().map(CacheBudget::new).collect()
}
