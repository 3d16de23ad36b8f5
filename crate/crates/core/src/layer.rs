//! One layer of an attention trace, widened to `f64` and in interleaved
//! rotary layout. This is what every policy and metric consumes.

use std::ops::Range;

use crate::error::{invalid_dim, Result};
use crate::rope::{PositionId, RopeConfig};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct LayerData {
    pub layer: usize,
    pub rope: RopeConfig,
    /// Pre-rotation prompt keys, one `[prompt_len][head_dim]` matrix per KV head.
    pub keys: Vec<Matrix>,
    /// Pre-rotation prompt queries, one matrix per query head.
    pub queries: Vec<Matrix>,
    /// Pre-rotation decode-phase queries, one `[decode_len][head_dim]` matrix per query head.
    pub decode_queries: Vec<Matrix>,
    pub prompt_positions: Vec<PositionId>,
    pub decode_positions: Vec<PositionId>,
    pub token_ids: Vec<u32>,
}

impl LayerData {
    /// Checks that every array agrees with the first KV head's shape.
    pub fn validate(&self) -> Result<()> {
        let d = self.rope.head_dim;
        let lp = self.prompt_len();
        let dec = self.decode_positions.len();
        if self.keys.is_empty() || self.queries.is_empty() {
            return Err(invalid_dim("layer needs at least one KV head and one query head"));
        }
        if !self.queries.len().is_multiple_of(self.keys.len()) {
            return Err(invalid_dim(format!(
                "{} query heads not divisible by {} KV heads",
                self.queries.len(),
                self.keys.len()
            )));
        }
        if self.decode_queries.len() != self.queries.len() {
            return Err(invalid_dim("decode queries must cover every query head"));
        }
        let shaped = |m: &Matrix, rows: usize| m.rows() == rows && m.cols() == d;
        if !self.keys.iter().all(|m| shaped(m, lp)) || !self.queries.iter().all(|m| shaped(m, lp)) {
            return Err(invalid_dim(format!("prompt arrays must be {lp}x{d}")));
        }
        if !self.decode_queries.iter().all(|m| shaped(m, dec)) {
            return Err(invalid_dim(format!("decode arrays must be {dec}x{d}")));
        }
        if self.token_ids.len() != lp {
            return Err(invalid_dim("one token id per prompt token"));
        }
        self.rope.validate()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_positions.len()
    }

    pub fn decode_len(&self) -> usize {
        self.decode_positions.len()
    }

    pub fn head_dim(&self) -> usize {
        self.rope.head_dim
    }

    pub fn num_kv_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn num_q_heads(&self) -> usize {
        self.queries.len()
    }

    pub fn group_size(&self) -> usize {
        self.num_q_heads() / self.num_kv_heads()
    }

    /// Query heads that share KV head `kv`.
    pub fn q_heads_of(&self, kv: usize) -> Range<usize> {
        let g = self.group_size();
        kv * g..(kv + 1) * g
    }
}
