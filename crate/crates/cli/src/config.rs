//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use kvevict_core::attention::{PoolMode, VisibilityRule};
use kvevict_core::metrics::Condition;
use kvevict_core::policy::{ContentStrategy, PolicyConfig, PolicyKind, PseudoQuerySpec};
use kvevict_core::trace::SyntheticShape;
use kvevict_core::Error;
use serde::Deserialize;

use crate::budget::{parse_budget_list, BudgetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Gen,
    Evict,
    Recall,
    Bounds,
    Simquery,
    Offsets,
    Alignment,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Gen => "gen",
            Experiment::Evict => "evict",
            Experiment::Recall => "recall",
            Experiment::Bounds => "bounds",
            Experiment::Simquery => "simquery",
            Experiment::Offsets => "offsets",
            Experiment::Alignment => "alignment",
        }
    }
}

pub const DEFAULT_BUDGETS: &str = "1%,2%,5%,10%";
pub const DEFAULT_WINDOW_SIZES: [usize; 8] = [128, 64, 32, 16, 8, 4, 2, 1];
pub const DEFAULT_BOUND_DIMS: [usize; 3] = [2, 8, 64];
pub const DEFAULT_BOUND_KEYS: [usize; 2] = [4, 64];
pub const DEFAULT_BOUND_TRIALS: usize = 10_000;
pub const DEFAULT_SIM_TRIALS: usize = 100;
pub const DEFAULT_OFFSET_POINTS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub trace: Option<PathBuf>,
    pub shape: SyntheticShape,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub policies: Vec<PolicyKind>,
    /// Settings shared by every policy; `kind` is replaced per policy.
    pub policy: PolicyConfig,
    pub budgets: Vec<BudgetSpec>,
    pub conditions: Vec<Condition>,
    pub trials: Option<usize>,
    /// Pseudo-window start positions; `None` means evenly spaced over `[0, L_p]`.
    pub offsets: Option<Vec<u64>>,
    pub offset_same_content: bool,
    pub window_sizes: Vec<usize>,
    pub bound_dims: Vec<usize>,
    pub bound_keys: Vec<usize>,
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        Self {
            experiment,
            trace: None,
            shape: SyntheticShape::default(),
            seed: 0,
            out: None,
            policies: PolicyKind::ALL.to_vec(),
            policy: PolicyConfig::new(PolicyKind::DapQ),
            budgets: parse_budget_list(DEFAULT_BUDGETS).expect("default budgets parse"),
            conditions: Condition::ALL.to_vec(),
            trials: None,
            offsets: None,
            offset_same_content: true,
            window_sizes: DEFAULT_WINDOW_SIZES.to_vec(),
            bound_dims: DEFAULT_BOUND_DIMS.to_vec(),
            bound_keys: DEFAULT_BOUND_KEYS.to_vec(),
        }
    }

    pub fn policy_config(&self, kind: PolicyKind) -> PolicyConfig {
        PolicyConfig {
            kind,
            ..self.policy.clone()
        }
    }

    pub fn trials_or(&self, default: usize) -> usize {
        self.trials.unwrap_or(default)
    }

    /// Sets the observation window, resizing the pseudo window to match.
    pub fn set_window(&mut self, w: usize) {
        self.policy.window = w;
        self.policy.pseudo = self.policy.pseudo.resized(w);
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let needs_policies = matches!(self.experiment, Experiment::Evict | Experiment::Recall);
        if needs_policies && self.policies.is_empty() {
            return bad("at least one policy is required".into());
        }
        if self.budgets.is_empty() {
            return bad("budget list is empty".into());
        }
        if self.trials == Some(0) {
            return bad("trials must be >= 1".into());
        }
        if self.policy.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.policy.pool_kernel.is_multiple_of(2) {
            return bad(format!("pooling kernel must be odd, got {}", self.policy.pool_kernel));
        }
        if self.policy.pseudo.len == 0 {
            return bad("pseudo window length must be >= 1".into());
        }
        if let ContentStrategy::FmLn { first, last } = self.policy.pseudo.strategy {
            if first.checked_add(last) != Some(self.policy.pseudo.len) {
                return bad(format!(
                    "fm_ln:{first},{last} does not sum to pseudo length {}",
                    self.policy.pseudo.len
                ));
            }
        }
        if self.experiment == Experiment::Gen && self.out.is_none() {
            return bad("gen needs --out".into());
        }
        if self.experiment == Experiment::Simquery && self.conditions.is_empty() {
            return bad("no conditions".into());
        }
        if self.experiment == Experiment::Alignment && self.window_sizes.is_empty() {
            return bad("no window sizes".into());
        }
        if self.experiment == Experiment::Bounds {
            if self.bound_dims.is_empty() || self.bound_keys.is_empty() {
                return bad("bounds needs at least one d_k and one key count".into());
            }
            if self.bound_dims.contains(&0) || self.bound_keys.contains(&0) {
                return bad("d_k and key counts must be >= 1".into());
            }
        }
        Ok(())
    }

    /// Every setting as `key=value` pairs, for CSV headers.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut m: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| m.push((k.to_string(), v));
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        put("experiment", self.experiment.name().into());
        put("seed", self.seed.to_string());
        match &self.trace {
            Some(p) => put("trace", p.display().to_string()),
            None => {
                let s = &self.shape;
                put("trace", "synthetic".into());
                put(
                    "synthetic_shape",
                    format!(
                        "layers={} q_heads={} kv_heads={} head_dim={} prompt_len={} decode_len={} rope_theta={}",
                        s.num_layers, s.num_q_heads, s.num_kv_heads, s.head_dim, s.prompt_len, s.decode_len, s.rope_theta
                    ),
                );
            }
        }
        let p = &self.policy;
        put("policies", self.policies.iter().map(|k| k.name()).collect::<Vec<_>>().join(","));
        put("window", p.window.to_string());
        put("pool_kernel", p.pool_kernel.to_string());
        put("pool_mode", pool_mode_name(p.pool_mode).into());
        put("sink_size", p.sink_size.to_string());
        put("recent_size", p.recent().to_string());
        put("visibility", visibility_name(p.visibility).into());
        put("dapq_pooling", p.dapq_pooling.to_string());
        put("h2o_normalize", p.h2o_normalize.to_string());
        put("pseudo_len", p.pseudo.len.to_string());
        put("pseudo_content", p.pseudo.strategy.to_string());
        put("pseudo_position_offset", p.pseudo.position_offset.to_string());
        put(
            "pseudo_insert_index",
            p.pseudo.insert_index.map_or("none".into(), |i| i.to_string()),
        );
        put("budgets", self.budgets.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","));
        put("budget_semantics", "prefill retention count per KV head; percent = floor(pct*L_p), min 1".into());
        if self.policies.contains(&PolicyKind::PyramidKV) {
            put("pyramid_schedule", "linear approximation".into());
        }
        put("conditions", self.conditions.iter().map(|c| c.name()).collect::<Vec<_>>().join(","));
        put("trials", self.trials.map_or("default".into(), |t| t.to_string()));
        put(
            "offsets",
            self.offsets.as_ref().map_or("even".into(), |o| {
                o.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }),
        );
        put("offset_content", if self.offset_same_content { "same" } else { "different" }.into());
        put("window_sizes", join(&self.window_sizes));
        put("bound_dims", join(&self.bound_dims));
        put("bound_keys", join(&self.bound_keys));
        m
    }
}

pub fn pool_mode_name(m: PoolMode) -> &'static str {
    match m {
        PoolMode::Max => "max",
        PoolMode::Avg => "avg",
    }
}

pub fn visibility_name(v: VisibilityRule) -> &'static str {
    match v {
        VisibilityRule::PromptOnly => "prompt_only",
        VisibilityRule::PromptPlusPrecedingPseudo => "prompt_plus_preceding_pseudo",
    }
}

pub fn parse_pool_mode(s: &str) -> Result<PoolMode, Error> {
    match s.to_ascii_lowercase().as_str() {
        "max" => Ok(PoolMode::Max),
        "avg" | "mean" => Ok(PoolMode::Avg),
        _ => Err(Error::InvalidConfig(format!("unknown pool mode {s:?}"))),
    }
}

pub fn parse_visibility(s: &str) -> Result<VisibilityRule, Error> {
    match s.to_ascii_lowercase().as_str() {
        "prompt_only" => Ok(VisibilityRule::PromptOnly),
        "prompt_plus_preceding_pseudo" | "causal" => Ok(VisibilityRule::PromptPlusPrecedingPseudo),
        _ => Err(Error::InvalidConfig(format!("unknown visibility rule {s:?}"))),
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| Error::InvalidConfig(format!("invalid {what} entry {p:?}")))
        })
        .collect()
}

// ---------------------------------------------------------------- file format

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    synthetic: ShapeSection,
    #[serde(default)]
    policy: PolicySection,
    #[serde(default)]
    pseudo: PseudoSection,
    #[serde(default)]
    experiment: ExperimentSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeSection {
    num_layers: Option<u32>,
    num_q_heads: Option<u32>,
    num_kv_heads: Option<u32>,
    head_dim: Option<u32>,
    prompt_len: Option<u32>,
    decode_len: Option<u32>,
    rope_theta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySection {
    names: Option<Vec<String>>,
    window: Option<usize>,
    pool_kernel: Option<usize>,
    pool_mode: Option<String>,
    sink_size: Option<usize>,
    recent_size: Option<usize>,
    visibility: Option<String>,
    dapq_pooling: Option<bool>,
    h2o_normalize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PseudoSection {
    len: Option<usize>,
    content: Option<String>,
    position_offset: Option<i64>,
    insert_index: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    budgets: Option<StringOrList>,
    conditions: Option<StringOrList>,
    trials: Option<usize>,
    offsets: Option<Vec<u64>>,
    offset_content: Option<String>,
    window_sizes: Option<Vec<usize>>,
    bound_dims: Option<Vec<usize>>,
    bound_keys: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StringOrList {
    One(String),
    Many(Vec<String>),
}

impl StringOrList {
    fn joined(&self) -> String {
        match self {
            StringOrList::One(s) => s.clone(),
            StringOrList::Many(v) => v.join(","),
        }
    }
}

pub fn parse_offset_content(s: &str) -> Result<bool, Error> {
    match s.to_ascii_lowercase().as_str() {
        "same" | "sc" => Ok(true),
        "different" | "dc" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("unknown offset content {s:?}"))),
    }
}

/// Applies a TOML config file to `cfg`.
pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<(), Error> {
    let f: FileConfig =
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {}", e.message())))?;

    cfg.trace = f.run.trace.or(cfg.trace.take());
    cfg.out = f.run.out.or(cfg.out.take());
    if let Some(s) = f.run.seed {
        cfg.seed = s;
    }

    let s = &mut cfg.shape;
    let sh = f.synthetic;
    s.num_layers = sh.num_layers.unwrap_or(s.num_layers);
    s.num_q_heads = sh.num_q_heads.unwrap_or(s.num_q_heads);
    s.num_kv_heads = sh.num_kv_heads.unwrap_or(s.num_kv_heads);
    s.head_dim = sh.head_dim.unwrap_or(s.head_dim);
    s.prompt_len = sh.prompt_len.unwrap_or(s.prompt_len);
    s.decode_len = sh.decode_len.unwrap_or(s.decode_len);
    s.rope_theta = sh.rope_theta.unwrap_or(s.rope_theta);

    let p = f.policy;
    if let Some(names) = p.names {
        cfg.policies = names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(w) = p.window {
        cfg.set_window(w);
    }
    let pc = &mut cfg.policy;
    pc.pool_kernel = p.pool_kernel.unwrap_or(pc.pool_kernel);
    if let Some(m) = p.pool_mode {
        pc.pool_mode = parse_pool_mode(&m)?;
    }
    pc.sink_size = p.sink_size.unwrap_or(pc.sink_size);
    pc.recent_size = p.recent_size.or(pc.recent_size);
    if let Some(v) = p.visibility {
        pc.visibility = parse_visibility(&v)?;
    }
    pc.dapq_pooling = p.dapq_pooling.unwrap_or(pc.dapq_pooling);
    pc.h2o_normalize = p.h2o_normalize.unwrap_or(pc.h2o_normalize);

    let ps = f.pseudo;
    if let Some(c) = ps.content {
        set_strategy(&mut pc.pseudo, c.parse()?);
    }
    if let Some(n) = ps.len {
        pc.pseudo = pseudo_with_len(&pc.pseudo, n);
    }
    pc.pseudo.position_offset = ps.position_offset.unwrap_or(pc.pseudo.position_offset);
    pc.pseudo.insert_index = ps.insert_index.or(pc.pseudo.insert_index);

    let e = f.experiment;
    if let Some(b) = e.budgets {
        cfg.budgets = parse_budget_list(&b.joined())?;
    }
    if let Some(c) = e.conditions {
        cfg.conditions = parse_list(&c.joined(), "condition")?;
    }
    cfg.trials = e.trials.or(cfg.trials);
    cfg.offsets = e.offsets.or(cfg.offsets.take());
    if let Some(c) = e.offset_content {
        cfg.offset_same_content = parse_offset_content(&c)?;
    }
    cfg.window_sizes = e.window_sizes.unwrap_or(std::mem::take(&mut cfg.window_sizes));
    cfg.bound_dims = e.bound_dims.unwrap_or(std::mem::take(&mut cfg.bound_dims));
    cfg.bound_keys = e.bound_keys.unwrap_or(std::mem::take(&mut cfg.bound_keys));
    Ok(())
}

/// Replaces the content strategy; an `fm_ln` split also sets the length.
pub fn set_strategy(spec: &mut PseudoQuerySpec, strategy: ContentStrategy) {
    if let ContentStrategy::FmLn { first, last } = strategy {
        spec.len = first.saturating_add(last);
    }
    spec.strategy = strategy;
}

/// Keeps an explicit `fm_ln` split when it already matches `len`.
pub fn pseudo_with_len(spec: &PseudoQuerySpec, len: usize) -> PseudoQuerySpec {
    match spec.strategy {
        ContentStrategy::FmLn { first, last } if first + last == len => PseudoQuerySpec {
            len,
            ..spec.clone()
        },
        _ => spec.resized(len),
    }
}

pub fn apply_config_file(cfg: &mut RunConfig, path: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(path)?;
    apply_config_text(cfg, &text)
}
