//! Experiment driver for the kvevict toolkit.
//!
//! Every subcommand resolves a [`RunConfig`] from built-in defaults, an
//! optional TOML file and command-line flags, runs fully in memory, and
//! only then writes its CSV (or `.kvqt` for `gen`). Failures print one
//! line of the form `error: kind=<Kind> msg="<text>"` on stderr.

pub mod budget;
pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use kvevict_core::report::write_atomic;
use kvevict_core::Error;
use thiserror::Error as ThisError;

use crate::budget::parse_budget_list;
use crate::commands::{execute, Output};
use crate::config::{
    apply_config_file, parse_list, parse_offset_content, parse_pool_mode, parse_visibility,
    pseudo_with_len, set_strategy, Experiment, RunConfig,
};

pub const THREADS_ENV: &str = "KVEVICT_THREADS";

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "UsageError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }

    /// The machine-readable stderr line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error: kind={} msg={:?}", self.kind(), msg.trim())
    }
}

#[derive(Debug, Parser)]
#[command(name = "kvevict", version, about = "KV-cache eviction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: Args,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic trace (.kvqt)
    Gen,
    /// Retained index sets and budget accounting per policy and budget
    Evict,
    /// Recall of each policy's retained set against the decode-attention gold set
    Recall,
    /// Random sweep of the query-to-attention divergence bounds
    Bounds,
    /// Pseudo vs decode query similarity under content/position conditions
    Simquery,
    /// Similarity as the pseudo window is moved away from the decode position
    Offsets,
    /// Cosine of window attention against decode attention per window size
    Alignment,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::Gen => Experiment::Gen,
            Command::Evict => Experiment::Evict,
            Command::Recall => Experiment::Recall,
            Command::Bounds => Experiment::Bounds,
            Command::Simquery => Experiment::Simquery,
            Command::Offsets => Experiment::Offsets,
            Command::Alignment => Experiment::Alignment,
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Args {
    /// TOML run config; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input trace; a synthetic trace is generated when absent
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    /// Output file; CSV goes to stdout when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated token counts and percentages, e.g. 64,128,2%
    #[arg(long, global = true)]
    pub budgets: Option<String>,
    /// Policy name; repeatable
    #[arg(long = "policy", global = true)]
    pub policies: Vec<String>,
    /// Observation window (and pseudo window length)
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Similarity condition(s): SC_SP, DC_SP, SC_DP, DC_DP; repeatable
    #[arg(long = "condition", global = true)]
    pub conditions: Vec<String>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Pseudo content, e.g. fm_ln:4,28 | rs_c:7 | rc_c:7 | fix_c:13,29
    #[arg(long, global = true)]
    pub pseudo: Option<String>,
    #[arg(long, global = true)]
    pub pseudo_len: Option<usize>,
    #[arg(long, global = true)]
    pub position_offset: Option<i64>,
    #[arg(long, global = true)]
    pub insert_index: Option<usize>,
    /// prompt_only | prompt_plus_preceding_pseudo
    #[arg(long, global = true)]
    pub visibility: Option<String>,
    #[arg(long, global = true)]
    pub pool_kernel: Option<usize>,
    /// max | avg
    #[arg(long, global = true)]
    pub pool_mode: Option<String>,
    #[arg(long, global = true)]
    pub dapq_pooling: bool,
    #[arg(long, global = true)]
    pub h2o_normalize: bool,
    #[arg(long, global = true)]
    pub sink_size: Option<usize>,
    #[arg(long, global = true)]
    pub recent_size: Option<usize>,
    /// Comma-separated pseudo-window start positions
    #[arg(long, global = true)]
    pub offsets: Option<String>,
    /// same | different
    #[arg(long, global = true)]
    pub offset_content: Option<String>,
    /// Comma-separated window sizes
    #[arg(long, global = true)]
    pub window_sizes: Option<String>,
    /// Comma-separated d_k values for `bounds`
    #[arg(long, global = true)]
    pub dims: Option<String>,
    /// Comma-separated key counts for `bounds`
    #[arg(long, global = true)]
    pub keys: Option<String>,
    #[arg(long, global = true)]
    pub layers: Option<u32>,
    #[arg(long, global = true)]
    pub q_heads: Option<u32>,
    #[arg(long, global = true)]
    pub kv_heads: Option<u32>,
    #[arg(long, global = true)]
    pub head_dim: Option<u32>,
    #[arg(long, global = true)]
    pub prompt_len: Option<u32>,
    #[arg(long, global = true)]
    pub decode_len: Option<u32>,
    #[arg(long, global = true)]
    pub rope_theta: Option<f64>,
}

/// Resolves defaults, config file and flags into a validated config.
pub fn resolve_config(command: Command, a: &Args) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::defaults(command.into());
    if let Some(path) = &a.config {
        apply_config_file(&mut cfg, path)?;
    }
    if a.trace.is_some() {
        cfg.trace = a.trace.clone();
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if let Some(b) = &a.budgets {
        cfg.budgets = parse_budget_list(b)?;
    }
    if !a.policies.is_empty() {
        cfg.policies = a
            .policies
            .iter()
            .flat_map(|p| p.split(','))
            .map(str::parse)
            .collect::<Result<_, _>>()?;
    }
    if let Some(w) = a.window {
        cfg.set_window(w);
    }
    if !a.conditions.is_empty() {
        cfg.conditions = parse_list(&a.conditions.join(","), "condition")?;
    }
    cfg.trials = a.trials.or(cfg.trials);

    let pc = &mut cfg.policy;
    if let Some(s) = &a.pseudo {
        set_strategy(&mut pc.pseudo, s.parse()?);
    }
    if let Some(n) = a.pseudo_len {
        pc.pseudo = pseudo_with_len(&pc.pseudo, n);
    }
    pc.pseudo.position_offset = a.position_offset.unwrap_or(pc.pseudo.position_offset);
    pc.pseudo.insert_index = a.insert_index.or(pc.pseudo.insert_index);
    if let Some(v) = &a.visibility {
        pc.visibility = parse_visibility(v)?;
    }
    pc.pool_kernel = a.pool_kernel.unwrap_or(pc.pool_kernel);
    if let Some(m) = &a.pool_mode {
        pc.pool_mode = parse_pool_mode(m)?;
    }
    pc.dapq_pooling |= a.dapq_pooling;
    pc.h2o_normalize |= a.h2o_normalize;
    pc.sink_size = a.sink_size.unwrap_or(pc.sink_size);
    pc.recent_size = a.recent_size.or(pc.recent_size);

    if let Some(o) = &a.offsets {
        cfg.offsets = Some(parse_list(o, "offset")?);
    }
    if let Some(c) = &a.offset_content {
        cfg.offset_same_content = parse_offset_content(c)?;
    }
    if let Some(w) = &a.window_sizes {
        cfg.window_sizes = parse_list(w, "window size")?;
    }
    if let Some(d) = &a.dims {
        cfg.bound_dims = parse_list(d, "d_k")?;
    }
    if let Some(k) = &a.keys {
        cfg.bound_keys = parse_list(k, "key count")?;
    }

    let s = &mut cfg.shape;
    s.num_layers = a.layers.unwrap_or(s.num_layers);
    s.num_q_heads = a.q_heads.unwrap_or(s.num_q_heads);
    s.num_kv_heads = a.kv_heads.unwrap_or(s.num_kv_heads);
    s.head_dim = a.head_dim.unwrap_or(s.head_dim);
    s.prompt_len = a.prompt_len.unwrap_or(s.prompt_len);
    s.decode_len = a.decode_len.unwrap_or(s.decode_len);
    s.rope_theta = a.rope_theta.unwrap_or(s.rope_theta);

    cfg.validate()?;
    Ok(cfg)
}

fn thread_pool() -> Result<rayon::ThreadPool, Error> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Runs a parsed command line to completion.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli.command, &cli.args)?;
    let output = thread_pool()?.install(|| execute(&cfg))?;
    let bytes = match &output {
        Output::Csv(t) => t.to_bytes()?,
        Output::Trace(b) => b.clone(),
    };
    match &cfg.out {
        Some(path) => write_atomic(path, &bytes)?,
        None => std::io::stdout().lock().write_all(&bytes).map_err(Error::from)?,
    }
    Ok(())
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
