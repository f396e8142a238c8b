//! Hybrid time-series nowcasting engine.
//!
//! The engine pairs two stages: a self-attention sequence forecaster (the
//! "future visionary") that maps a window of past observations to a forecast
//! over a horizon, and a regularized Newton-boosted tree ensemble (the
//! "decision maker") that consumes those forecasts alongside present features
//! and emits an additive adjustment to the present state. A benchmark harness
//! compares the hybrid against the standalone baselines on identical
//! chronological splits.
//!
//! Module map:
//! - [`numcore`] — dense f64 tensors, reverse-mode autodiff, Adam, seeded RNG
//! - [`dataio`] — CSV ingestion, cleaning, daily aggregation, windowing,
//!   normalization, chronological splits, synthetic surrogate data
//! - [`gbt`] — gradient-boosted regression trees with L1 leaf regularization
//! - [`visionary`] — the attention-based forecaster and its training loop
//! - [`pipeline`] — the two-stage hybrid model and streaming feedback loop
//! - [`eval`] — metrics, benchmark orchestration, diagnostic exports

pub mod dataio;
pub mod error;
pub mod eval;
pub mod gbt;
pub mod numcore;
pub mod pipeline;
pub mod visionary;

pub use error::{Error, Result};
