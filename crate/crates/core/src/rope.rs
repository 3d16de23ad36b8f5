//! Rotary position embedding over interleaved pairs `(x[2i], x[2i+1])`.
//!
//! Pair `i` is rotated by `p * scaling * theta_base^(-2i / head_dim)`. The
//! frequency table is computed once per [`Rope`] and never mutated, so one
//! instance can be shared freely across threads.

use crate::error::{invalid_config, invalid_dim, Result};

/// Token position index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PositionId(pub u64);

impl PositionId {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn shifted(self, delta: u64) -> Self {
        PositionId(self.0 + delta)
    }
}

impl From<usize> for PositionId {
    fn from(v: usize) -> Self {
        PositionId(v as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta_base: f64,
    pub scaling: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            theta_base: 10_000.0,
            scaling: 1.0,
        }
    }

    pub fn with_theta(mut self, theta_base: f64) -> Self {
        self.theta_base = theta_base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(invalid_config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !self.theta_base.is_finite() || self.theta_base <= 1.0 {
            return Err(invalid_config(format!(
                "rope theta_base must be > 1, got {}",
                self.theta_base
            )));
        }
        if !self.scaling.is_finite() || self.scaling <= 0.0 {
            return Err(invalid_config(format!(
                "rope scaling must be positive, got {}",
                self.scaling
            )));
        }
        Ok(())
    }
}

/// A validated rotary embedding with its frequency table.
#[derive(Debug, Clone)]
pub struct Rope {
    cfg: RopeConfig,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(cfg: RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.head_dim as f64;
        let inv_freq = (0..cfg.head_dim / 2)
            .map(|i| cfg.scaling * cfg.theta_base.powf(-(2.0 * i as f64) / d))
            .collect();
        Ok(Self { cfg, inv_freq })
    }

    pub fn config(&self) -> &RopeConfig {
        &self.cfg
    }

    pub fn head_dim(&self) -> usize {
        self.cfg.head_dim
    }

    /// Per-pair angular frequencies (scaling already folded in).
    pub fn frequencies(&self) -> &[f64] {
        &self.inv_freq
    }

    pub fn apply(&self, x: &[f64], pos: PositionId) -> Result<Vec<f64>> {
        if x.len() != self.cfg.head_dim {
            return Err(invalid_dim(format!(
                "rope expects {} dims, got {}",
                self.cfg.head_dim,
                x.len()
            )));
        }
        let mut out = x.to_vec();
        self.apply_in_place(&mut out, pos);
        Ok(out)
    }

    /// Rotates `x` in place. `x.len()` must equal `head_dim`.
    pub(crate) fn apply_in_place(&self, x: &mut [f64], pos: PositionId) {
        debug_assert_eq!(x.len(), self.cfg.head_dim);
        if pos.0 == 0 {
            return;
        }
        let p = pos.0 as f64;
        for (pair, &f) in x.chunks_exact_mut(2).zip(&self.inv_freq) {
            let (sin, cos) = (p * f).sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }

    /// Rotates every row of a row-major block of vectors at its own position.
    pub(crate) fn apply_rows(&self, rows: &[f64], positions: &[PositionId]) -> Vec<f64> {
        let d = self.cfg.head_dim;
        debug_assert_eq!(rows.len(), d * positions.len());
        let mut out = rows.to_vec();
        for (row, &p) in out.chunks_exact_mut(d).zip(positions) {
            self.apply_in_place(row, p);
        }
        out
    }
}

/// One-shot convenience wrapper around [`Rope::apply`].
pub fn apply_rope(x: &[f64], pos: PositionId, cfg: &RopeConfig) -> Result<Vec<f64>> {
    Rope::new(*cfg)?.apply(x, pos)
}

/// Converts a vector stored in half-split layout (`x[i]` pairs with
/// `x[i + d/2]`) to the interleaved layout used throughout the crate.
pub fn half_split_to_interleaved(x: &[f64]) -> Vec<f64> {
    let half = x.len() / 2;
    let mut out = vec![0.0; x.len()];
    for i in 0..half {
        out[2 * i] = x[i];
        out[2 * i + 1] = x[i + half];
    }
    out
}
