//! Helpers shared by several test targets.
#![allow(dead_code)]

use hybridseq::model::{Model, Prompt};
use hybridseq::numerics::{rng, Parameters, Rng, Tensor, Var};
use hybridseq::ssm::{SsmParams, SsmVars};
use rand::Rng as _;

pub fn prompt(seed: u64, m: usize, n: usize, d: usize, vocab: usize) -> Prompt {
    let mut r = rng(seed);
    let video = Tensor::randn(vec![m, d], 1.0, &mut r);
    let text = (0..n).map(|_| r.random_range(0..vocab)).collect();
    Prompt::new(video, text).unwrap()
}

/// Randomizes α and the biases so no path is switched off.
pub fn jitter(model: &mut Model, seed: u64) {
    let mut r = rng(seed ^ 0xa5a5);
    model.visit_mut("", &mut |path, t| {
        if path.ends_with(".alpha") || path.ends_with("bias") && !path.contains("dt_bias") {
            for v in t.data_mut() {
                *v += r.random_range(-0.5..0.5);
            }
        }
    });
}

/// Moves the block away from its initialization, where `Δ ≈ 1e-3` leaves
/// some adjoints near 1e-9, below what central differences at `h = 1e-5`
/// resolve against the loss's rounding noise.
pub fn well_conditioned(mut p: SsmParams, r: &mut Rng) -> SsmParams {
    p.dt_bias = Tensor::uniform(p.dt_bias.shape().to_vec(), -0.5, 1.0, r);
    p.ln_gain = Tensor::uniform(p.ln_gain.shape().to_vec(), 0.5, 1.5, r);
    p.ln_bias = Tensor::randn(p.ln_bias.shape().to_vec(), 0.3, r);
    p.conv_bias = Tensor::randn(p.conv_bias.shape().to_vec(), 0.3, r);
    p.a_log = Tensor::uniform(p.a_log.shape().to_vec(), -1.0, 0.5, r);
    if let Some(w) = &mut p.x_proj {
        *w = w.map(|v| 2.0 * v);
    }
    p
}

/// Swaps freshly bound leaves for the checker's probe leaves.
pub fn substitute(mut b: SsmVars, map: &[(Var, Var)]) -> SsmVars {
    let sub = |v: Var| map.iter().find(|(from, _)| *from == v).map(|(_, to)| *to).unwrap_or(v);
    b.ln_gain = sub(b.ln_gain);
    b.ln_bias = sub(b.ln_bias);
    b.in_proj = sub(b.in_proj);
    b.conv_weight = sub(b.conv_weight);
    b.conv_bias = sub(b.conv_bias);
    b.x_proj = b.x_proj.map(sub);
    b.dt_proj = b.dt_proj.map(sub);
    b.dt_bias = sub(b.dt_bias);
    b.a_log = sub(b.a_log);
    b.d_skip = sub(b.d_skip);
    b.out_proj = sub(b.out_proj);
    b
}
