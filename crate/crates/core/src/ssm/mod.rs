//! State-space primitives: zero-order-hold discretization, the selective
//! scan (sequential and chunked), and the Mamba / Mamba-2 blocks built on it.
//!
//! Two decay structures are supported:
//!
//! * **Mamba** keeps a diagonal `A` with one negative entry per
//!   (channel, state) pair and discretizes the input matrix with the full
//!   zero-order hold, `B̄ = (exp(ΔA) − 1)/A · B`.
//! * **Mamba-2** restricts `A` to a negative scalar per head and uses
//!   `B̄ = Δ·B`. The scalar decay is what makes the chunked scan possible.
//!
//! `A` is stored as `log(−A)` so it stays negative under gradient updates.

mod block;
mod conv;
mod scan;

use serde::{Deserialize, Serialize};

pub use block::{mamba_block_forward, mamba_block_graph, SsmParams, SsmVars};
pub use conv::causal_conv1d;
pub use scan::{checkpoint_interval, kept_states, scan_chunked_ssd, scan_sequential, selective_scan, SelectiveInputs};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Width of the causal depthwise convolution in front of the scan.
pub const CONV_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SsmVariant {
    Mamba1,
    Mamba2,
}

impl SsmVariant {
    pub fn default_state_size(self) -> usize {
        match self {
            SsmVariant::Mamba1 => 16,
            SsmVariant::Mamba2 => 64,
        }
    }
}

/// Recurrent state carried between calls.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    /// `[n_heads, head_dim, n_state]`; Mamba uses a single head spanning all
    /// channels.
    pub h: Tensor,
    /// Last `CONV_WIDTH − 1` convolution inputs, `[CONV_WIDTH − 1, channels]`.
    pub conv_tail: Tensor,
    /// Tokens consumed so far.
    pub position: usize,
}

impl SsmState {
    pub fn zeros(n_heads: usize, head_dim: usize, n_state: usize) -> Self {
        Self {
            h: Tensor::zeros(vec![n_heads, head_dim, n_state]),
            conv_tail: Tensor::zeros(vec![CONV_WIDTH - 1, n_heads * head_dim]),
            position: 0,
        }
    }

    pub fn channels(&self) -> usize {
        let s = self.h.shape();
        s[0] * s[1]
    }

    pub fn n_state(&self) -> usize {
        self.h.shape()[2]
    }
}

/// Zero-order hold for a scalar system `h' = a·h + b·x`:
/// `ā = exp(Δa)` and `b̄ = (exp(Δa) − 1)/a · b`.
///
/// The input coefficient is evaluated as `Δ · expm1(Δa)/(Δa)`, which is exact
/// in the `a → 0` limit where it tends to `Δ·b`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {delta}")));
    }
    let z = delta * a;
    Ok((z.exp(), delta * phi1(z) * b))
}

/// `expm1(z)/z`, with the removable singularity at 0 filled in.
#[inline]
pub(crate) fn phi1(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi1`]: `(z·eᶻ − expm1(z)) / z²`.
#[inline]
pub(crate) fn phi1_prime(z: f64) -> f64 {
    if z.abs() < 0.1 {
        // Taylor series: sum_{k>=1} k z^{k-1} / (k+1)!
        let mut sum = 0.0;
        let mut zk = 1.0;
        let mut fact = 2.0;
        for k in 1..10 {
            sum += k as f64 * zk / fact;
            zk *= z;
            fact *= (k + 2) as f64;
        }
        sum
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Diagonal HiPPO initialization, real S4D convention: `aₙ = −(n + 1)`.
pub fn hippo_init(n_state: usize) -> Vec<f64> {
    (0..n_state).map(|n| -((n + 1) as f64)).collect()
}
