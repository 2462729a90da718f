//! Analytic and counted cost of a pre-fill forward, activation memory,
//! wall-clock benchmarking and log-log scaling fits.
//!
//! FLOP convention: a multiply-add is 2 FLOPs, elementwise arithmetic is 1
//! per element, transcendentals 4, softmax 5 per score and layer norm 8 per
//! element (see [`crate::numerics::flops`]). Costs cover the decoder stack
//! only; there is no vision encoder.

mod bench;
mod cost;
mod fit;

pub use bench::{
    analyze, arch_name, bench, median, read_csv, read_json, write_csv, write_json, Analysis, BenchConfig, CostReport,
    MIN_REPEATS, SCHEMA,
};
pub use cost::{analytic_cost, counted_cost, leading_terms, memory_estimate, Cost, MemoryEstimate};
pub use fit::{fit_scaling_exponent, ScalingFit, MIN_POINTS, MIN_SPAN};
