//! FLOP accounting convention shared by the graph and the analytic models.
//!
//! A multiply-add is 2 FLOPs. Elementwise arithmetic is 1 FLOP per element.
//! Transcendental maps (exp, sigmoid, SiLU, GELU, softplus) are charged
//! [`TRANSCENDENTAL`] per element, softmax [`SOFTMAX`] per score entry and
//! layer norm [`LAYER_NORM`] per element. Data movement (slices, concats,
//! transposes, gathers) is free.

pub const TRANSCENDENTAL: u64 = 4;
/// max, subtract, exp, sum, divide.
pub const SOFTMAX: u64 = 5;
/// mean, centre, square, variance, scale, gain, bias, plus the rsqrt share.
pub const LAYER_NORM: u64 = 8;
/// Depthwise causal convolution: one multiply-add per tap plus the bias.
pub const fn conv(rows: usize, channels: usize, width: usize) -> u64 {
    (rows * channels * (2 * width + 1)) as u64
}

pub const fn matmul(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Per token and head: the decay `exp(dt·a)` plus `dt·B`; per state entry the
/// update `a·h + (dt·B)·x` and the readout `C·h` accumulation.
pub const fn scan_mamba2(tokens: usize, heads: usize, head_dim: usize, n_state: usize) -> u64 {
    (tokens * heads * (1 + TRANSCENDENTAL as usize + n_state + 5 * head_dim * n_state)) as u64
}

/// Per token, channel and state entry: the exponent, the decay, the
/// `expm1`-based input coefficient, the update and the readout.
pub const fn scan_mamba1(tokens: usize, channels: usize, n_state: usize) -> u64 {
    (tokens * channels * n_state * (1 + 2 * TRANSCENDENTAL as usize + 4 + 4 + 2)) as u64
}

/// Cross-entropy over `rows` rows of `vocab` logits (softmax plus the pick).
pub const fn cross_entropy(rows: usize, vocab: usize) -> u64 {
    (rows * vocab) as u64 * SOFTMAX + rows as u64
}
