//! One function per subcommand. Each returns its complete output in memory;
//! nothing touches the filesystem until the run has succeeded.

use kvevict_core::layer::LayerData;
use kvevict_core::metrics::{
    layer_gold_sets, offset_decay_curve, similarity_experiment, trial_rng, verify_bounds,
    window_attention_alignment, ObservationWindow, SIMILARITY_AGGREGATION,
};
use kvevict_core::policy::{layer_budgets, select_layer, CacheBudget, PolicyConfig, PolicyKind};
use kvevict_core::report::{fmt_f64, CsvTable};
use kvevict_core::tensor::{dot, normalize, softmax_stable, vector_distance, Norm};
use kvevict_core::trace::{decode_trace, generate_synthetic_trace, write_trace, AttentionTrace};
use kvevict_core::{Error, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::budget::BudgetSpec;
use crate::config::{
    Experiment, RunConfig, DEFAULT_BOUND_TRIALS, DEFAULT_OFFSET_POINTS, DEFAULT_SIM_TRIALS,
};

type Result<T> = std::result::Result<T, Error>;

pub enum Output {
    Csv(CsvTable),
    Trace(Vec<u8>),
}

pub fn execute(cfg: &RunConfig) -> Result<Output> {
    match cfg.experiment {
        Experiment::Gen => gen(cfg).map(Output::Trace),
        Experiment::Evict => evict(cfg).map(Output::Csv),
        Experiment::Recall => recall(cfg).map(Output::Csv),
        Experiment::Bounds => bounds(cfg).map(Output::Csv),
        Experiment::Simquery => simquery(cfg).map(Output::Csv),
        Experiment::Offsets => offsets(cfg).map(Output::Csv),
        Experiment::Alignment => alignment(cfg).map(Output::Csv),
    }
}

fn load_trace(cfg: &RunConfig) -> Result<AttentionTrace> {
    match &cfg.trace {
        Some(path) => decode_trace(&std::fs::read(path)?),
        None => generate_synthetic_trace(&cfg.shape, cfg.seed),
    }
}

fn load_layers(cfg: &RunConfig) -> Result<Vec<LayerData>> {
    let t = load_trace(cfg)?;
    (0..t.num_layers()).map(|l| t.layer(l)).collect()
}

fn table<S: Into<String>>(cfg: &RunConfig, header: impl IntoIterator<Item = S>) -> CsvTable {
    let mut t = CsvTable::new(header);
    for (k, v) in cfg.describe() {
        t.meta(k, v);
    }
    t
}

fn gen(cfg: &RunConfig) -> Result<Vec<u8>> {
    let t = generate_synthetic_trace(&cfg.shape, cfg.seed)?;
    let mut buf = Vec::new();
    write_trace(&t, &mut buf)?;
    Ok(buf)
}

/// Window parameters clamped so that every policy is well defined at budget `b`.
fn effective_config(base: &PolicyConfig, b: usize) -> PolicyConfig {
    PolicyConfig {
        window: base.window.min(b),
        recent_size: Some(base.recent().min(b)),
        sink_size: base.sink_size.min(b - 1),
        ..base.clone()
    }
}

fn window_descriptor(cfg: &PolicyConfig) -> String {
    match cfg.kind {
        PolicyKind::DapQ => format!("pseudo={}", cfg.pseudo.len),
        PolicyKind::SnapKV | PolicyKind::PyramidKV => format!("observation={}", cfg.window),
        PolicyKind::H2O => format!("recent={}", cfg.recent()),
        PolicyKind::StreamingLLM => format!("sink={}", cfg.sink_size),
    }
}

struct Cell {
    kind: PolicyKind,
    spec: BudgetSpec,
    tokens: usize,
    cfg: PolicyConfig,
    /// Per layer: layer budget and the retained set of each KV head.
    layers: Vec<(usize, Vec<kvevict_core::IndexSet>)>,
}

fn run_cells(cfg: &RunConfig, layers: &[LayerData]) -> Result<Vec<Cell>> {
    let lp = layers[0].prompt_len();
    let jobs: Vec<(PolicyKind, BudgetSpec)> = cfg
        .policies
        .iter()
        .flat_map(|&k| cfg.budgets.iter().map(move |&b| (k, b)))
        .collect();
    jobs.into_par_iter()
        .map(|(kind, spec)| {
            let tokens = spec.resolve(lp);
            let pc = effective_config(&cfg.policy_config(kind), tokens);
            let budgets = layer_budgets(&pc, CacheBudget::new(tokens)?, layers.len())?;
            let per_layer = layers
                .iter()
                .zip(&budgets)
                .map(|(layer, &b)| Ok((b.tokens(), select_layer(layer, b, &pc)?.retained)))
                .collect::<Result<_>>()?;
            Ok(Cell {
                kind,
                spec,
                tokens,
                cfg: pc,
                layers: per_layer,
            })
        })
        .collect()
}

fn evict(cfg: &RunConfig) -> Result<CsvTable> {
    let layers = load_layers(cfg)?;
    let mut t = table(
        cfg,
        [
            "policy", "budget", "budget_tokens", "window", "layer", "layer_budget", "kv_head",
            "retained_count", "retained",
        ],
    );
    for cell in run_cells(cfg, &layers)? {
        for (l, (lb, sets)) in cell.layers.iter().enumerate() {
            for (kv, set) in sets.iter().enumerate() {
                let idx: Vec<String> = set.as_slice().iter().map(|i| i.to_string()).collect();
                t.push_row([
                    cell.kind.name().to_string(),
                    cell.spec.to_string(),
                    cell.tokens.to_string(),
                    window_descriptor(&cell.cfg),
                    l.to_string(),
                    lb.to_string(),
                    kv.to_string(),
                    set.len().to_string(),
                    idx.join(" "),
                ])?;
            }
        }
    }
    Ok(t)
}

fn recall(cfg: &RunConfig) -> Result<CsvTable> {
    let layers = load_layers(cfg)?;
    if layers[0].decode_len() == 0 {
        return Err(Error::MissingDecodePhase);
    }
    let cells = run_cells(cfg, &layers)?;
    let mut t = table(
        cfg,
        [
            "policy", "budget", "budget_tokens", "window", "layer", "hits", "gold", "recall",
        ],
    );
    let gold: Vec<Vec<Vec<kvevict_core::IndexSet>>> = cells
        .par_iter()
        .map(|cell| {
            layers
                .iter()
                .zip(&cell.layers)
                .map(|(layer, (lb, _))| layer_gold_sets(layer, *lb))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    for (cell, gold) in cells.iter().zip(&gold) {
        let (mut hits_all, mut gold_all) = (0usize, 0usize);
        let mut row = |layer: String, hits: usize, g: usize| {
            t.push_row([
                cell.kind.name().to_string(),
                cell.spec.to_string(),
                cell.tokens.to_string(),
                window_descriptor(&cell.cfg),
                layer,
                hits.to_string(),
                g.to_string(),
                fmt_f64(hits as f64 / g as f64),
            ])
        };
        for (l, ((_, pred), gold)) in cell.layers.iter().zip(gold).enumerate() {
            let hits: usize = gold.iter().zip(pred).map(|(g, p)| g.intersection_len(p)).sum();
            let g: usize = gold.iter().map(|g| g.len()).sum();
            hits_all += hits;
            gold_all += g;
            row(l.to_string(), hits, g)?;
        }
        row("all".into(), hits_all, gold_all)?;
    }
    Ok(t)
}

/// One random bound-checker instance.
pub struct BoundInstance {
    pub q: Vec<f64>,
    pub q2: Vec<f64>,
    pub keys: Matrix,
}

/// Draws `(q, q', K)`: Gaussian `q`; `q'` is either independent or a
/// perturbation of `q` at a log-uniform scale; keys are Gaussian at a
/// log-uniform scale so softmax ranges from flat to saturated.
pub fn bound_instance<R: Rng>(rng: &mut R, d_k: usize, n_keys: usize) -> BoundInstance {
    let gauss = |n: usize, s: f64, rng: &mut R| -> Vec<f64> {
        (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let q = gauss(d_k, 1.0, rng);
    let q2 = if rng.random_bool(0.2) {
        gauss(d_k, 1.0, rng)
    } else {
        let eps = 10f64.powf(rng.random_range(-4.0..1.0));
        let noise = gauss(d_k, eps, rng);
        q.iter().zip(noise).map(|(a, b)| a + b).collect()
    };
    let scale = 10f64.powf(rng.random_range(-1.0..1.5));
    let keys = Matrix::new(n_keys, d_k, gauss(n_keys * d_k, scale, rng)).expect("finite keys");
    BoundInstance { q, q2, keys }
}

pub const BOUNDS_HEADER: [&str; 18] = [
    "d_k", "n_keys", "trial", "sim_q", "k_max", "lhs1", "rhs1", "lhs2", "rhs2", "lhs4", "rhs4",
    "lhs5", "rhs5", "lipschitz_lhs", "lipschitz_rhs", "unit_identity_gap", "theorem_holds", "holds",
];

fn bounds(cfg: &RunConfig) -> Result<CsvTable> {
    let trials = cfg.trials_or(DEFAULT_BOUND_TRIALS);
    let grid: Vec<(usize, usize, usize)> = cfg
        .bound_dims
        .iter()
        .flat_map(|&d| cfg.bound_keys.iter().map(move |&n| (d, n)))
        .enumerate()
        .map(|(i, (d, n))| (i, d, n))
        .collect();
    let rows: Vec<Vec<String>> = grid
        .par_iter()
        .flat_map_iter(|&(cell, d, n)| {
            (0..trials).map(move |trial| bound_row(cfg.seed, cell, trial, d, n))
        })
        .collect::<Result<_>>()?;
    let violations = rows.iter().filter(|r| r[17] == "false").count();
    let mut t = table(cfg, BOUNDS_HEADER);
    t.meta("slack", kvevict_core::metrics::BOUND_SLACK);
    t.meta("violations", violations);
    for r in rows {
        t.push_row(r)?;
    }
    Ok(t)
}

fn bound_row(seed: u64, cell: usize, trial: usize, d: usize, n: usize) -> Result<Vec<String>> {
    let mut rng = trial_rng(seed, ((cell as u64) << 32) | trial as u64);
    let inst = bound_instance(&mut rng, d, n);
    let r = verify_bounds(&inst.q, &inst.q2, &inst.keys, d)?;

    let (u, _) = normalize(&inst.q)?;
    let (u2, _) = normalize(&inst.q2)?;
    let scale = 1.0 / (d as f64).sqrt();
    let s: Vec<f64> = inst.keys.iter_rows().map(|k| dot(&u, k) * scale).collect();
    let s2: Vec<f64> = inst.keys.iter_rows().map(|k| dot(&u2, k) * scale).collect();
    let lip_lhs = vector_distance(&softmax_stable(&s)?, &softmax_stable(&s2)?, Norm::L1)?;
    let lip_rhs = vector_distance(&s, &s2, Norm::Linf)?;
    let diff_sq: f64 = u.iter().zip(&u2).map(|(a, b)| (a - b) * (a - b)).sum();
    let identity_gap = (diff_sq - 2.0 * (1.0 - dot(&u, &u2))).abs();

    let slack = kvevict_core::metrics::BOUND_SLACK;
    let holds = r.holds && lip_lhs <= lip_rhs + slack && identity_gap <= slack;
    let f = fmt_f64;
    Ok(vec![
        d.to_string(),
        n.to_string(),
        trial.to_string(),
        f(r.sim_q),
        f(r.k_max),
        f(r.lhs1),
        f(r.rhs1),
        f(r.lhs2),
        f(r.rhs2),
        f(r.lhs4),
        f(r.rhs4),
        f(r.lhs5),
        f(r.rhs5),
        f(lip_lhs),
        f(lip_rhs),
        f(identity_gap),
        r.holds.to_string(),
        holds.to_string(),
    ])
}

fn simquery(cfg: &RunConfig) -> Result<CsvTable> {
    let layers = load_layers(cfg)?;
    let trials = cfg.trials_or(DEFAULT_SIM_TRIALS);
    let reports = cfg
        .conditions
        .par_iter()
        .map(|&c| similarity_experiment(&layers, c, trials, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut t = table(cfg, ["condition", "trial", "pre_rope", "post_rope"]);
    t.meta("window", layers[0].decode_len());
    t.meta("aggregation", SIMILARITY_AGGREGATION);
    for r in &reports {
        for tr in &r.per_trial {
            t.push_row([
                r.condition.name().to_string(),
                tr.trial.to_string(),
                fmt_f64(tr.pre_rope),
                fmt_f64(tr.post_rope),
            ])?;
        }
        t.push_row([
            r.condition.name().to_string(),
            "mean".to_string(),
            fmt_f64(r.pre_rope),
            fmt_f64(r.post_rope),
        ])?;
    }
    Ok(t)
}

fn offsets(cfg: &RunConfig) -> Result<CsvTable> {
    let layers = load_layers(cfg)?;
    let lp = layers[0].prompt_len() as u64;
    let starts = cfg.offsets.clone().unwrap_or_else(|| {
        (0..=DEFAULT_OFFSET_POINTS)
            .map(|i| lp * i / DEFAULT_OFFSET_POINTS)
            .collect()
    });
    let curve = offset_decay_curve(&layers, &starts, cfg.offset_same_content, cfg.seed)?;
    let rho = curve.spearman.map_or("nan".to_string(), fmt_f64);
    let mut t = table(cfg, ["start", "abs_offset", "similarity", "spearman_rho"]);
    t.meta("true_start", layers[0].decode_positions[0].value());
    t.meta("spearman_rho", &rho);
    t.meta("aggregation", SIMILARITY_AGGREGATION);
    for p in &curve.points {
        t.push_row([
            p.start.to_string(),
            p.abs_offset.to_string(),
            fmt_f64(p.similarity),
            rho.clone(),
        ])?;
    }
    Ok(t)
}

fn alignment(cfg: &RunConfig) -> Result<CsvTable> {
    let layers = load_layers(cfg)?;
    let pc = cfg.policy_config(PolicyKind::DapQ);
    let a = ObservationWindow::Pseudo(pc.pseudo.clone());
    let b = ObservationWindow::LastPrompt;
    let rows = cfg
        .window_sizes
        .par_iter()
        .map(|&w| window_attention_alignment(&layers, &a, &b, &[w], &pc))
        .collect::<Result<Vec<_>>>()?;
    let mut t = table(cfg, ["window_size", a.name(), b.name()]);
    t.meta("reference", "aggregated decode-query attention over prompt keys");
    t.meta("aggregation", "cosine per layer and KV head, uniform mean");
    for tbl in rows {
        for r in tbl.rows {
            t.push_row([r.window_size.to_string(), fmt_f64(r.a), fmt_f64(r.b)])?;
        }
    }
    Ok(t)
}
