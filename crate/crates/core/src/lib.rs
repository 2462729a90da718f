//! Hybrid state-space / attention decoder at desk scale.
//!
//! Video tokens are updated by Mamba-style selective state-space blocks,
//! text tokens by an α-blended mix of cross-attention over the video and
//! causal self-attention over the text. A quadratic joint-attention
//! transformer is provided as the baseline, together with the training
//! harness (language-modelling and top-k distillation losses, staged
//! freezing) and a profiler that measures how both architectures scale.

pub mod attention;
pub mod error;
pub mod model;
pub mod numerics;
pub mod profiler;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, Mode, Tensor, Var};
