//! KV-cache eviction toolkit.
//!
//! Scores prompt tokens with an observation window of pseudo queries placed
//! at the positions the first decode steps will occupy, and compares that
//! selection against SnapKV, PyramidKV budgets, H2O and StreamingLLM. The
//! [`metrics`] module holds the measurement side: gold-set recall, query
//! similarity studies and a checker for the query-to-attention divergence
//! bounds.

pub mod attention;
pub mod error;
pub mod layer;
pub mod metrics;
pub mod policy;
pub mod report;
pub mod rope;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use layer::LayerData;
pub use rope::{PositionId, Rope, RopeConfig};
pub use tensor::{IndexSet, Matrix, Vector};
