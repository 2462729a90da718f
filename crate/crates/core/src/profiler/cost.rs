use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, HybridStackConfig, Model};
use crate::numerics::flops::{self, LAYER_NORM, SOFTMAX, TRANSCENDENTAL};
use crate::numerics::{Binder, Graph, Mode};
use crate::ssm::{checkpoint_interval, kept_states, SsmVariant, CONV_WIDTH};

/// FLOPs and activation values of one pre-fill forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub memory: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost { flops: self.flops + o.flops, memory: self.memory + o.memory }
    }
}

const fn cost(flops: u64, memory: u64) -> Cost {
    Cost { flops, memory }
}

/// Leading-order Table-style terms: `d(M+N)²` for the baseline and
/// `dMN + d²M` for the hybrid.
pub fn leading_terms(arch: Arch, m: usize, n: usize, d: usize) -> f64 {
    let (m, n, d) = (m as f64, n as f64, d as f64);
    match arch {
        Arch::Baseline => d * (m + n) * (m + n),
        Arch::Hybrid => d * m * n + d * d * m,
    }
}

struct Shape {
    d: u64,
    h: u64,
    vocab: u64,
}

impl Shape {
    fn ln(&self, rows: u64) -> Cost {
        cost(rows * self.d * LAYER_NORM, rows * self.d)
    }

    /// Multi-head attention of projected queries `[lq, d]` over keys and
    /// values `[lk, d]`, output projection included.
    fn attend(&self, lq: u64, lk: u64) -> Cost {
        let (d, h) = (self.d, self.h);
        let per_score = 2 + SOFTMAX;
        let flops = 4 * lq * lk * d + per_score * h * lq * lk + 2 * lq * d * d;
        let concat = if h > 1 { lq * d } else { 0 };
        let memory = 3 * h * lq * lk + 2 * lq * d + 2 * lk * d + concat + lq * d;
        cost(flops, memory)
    }

    fn self_attention(&self, l: u64) -> Cost {
        cost(6 * l * self.d * self.d, 3 * l * self.d) + self.attend(l, l)
    }

    /// `x + MLP(LN(x))` with hidden width `4d`.
    fn mlp_residual(&self, r: u64) -> Cost {
        let d = self.d;
        let flops = r * d * LAYER_NORM + 16 * r * d * d + 4 * r * d + 4 * r * d * TRANSCENDENTAL + r * d + r * d;
        cost(flops, 16 * r * d)
    }
}

fn mamba_block(cfg: &HybridStackConfig, variant: SsmVariant, t: u64) -> Cost {
    let d = cfg.d as u64;
    let di = 2 * d;
    let ns = cfg.state_size() as u64;
    let tr = TRANSCENDENTAL;
    let mut c = cost(t * d * LAYER_NORM, t * d);
    let proj = match variant {
        SsmVariant::Mamba1 => 2 * di,
        SsmVariant::Mamba2 => 2 * di + 2 * ns + cfg.ssm_heads as u64,
    };
    c = c + cost(2 * t * d * proj, t * proj + 2 * t * di);
    c = c + cost(flops::conv(t as usize, di as usize, CONV_WIDTH), t * di);
    c = c + cost(tr * t * di, t * di);
    let (dt_width, scan) = match variant {
        SsmVariant::Mamba1 => {
            let r = d.div_ceil(16);
            c = c + cost(2 * t * di * (r + 2 * ns), t * (r + 2 * ns) + t * (r + 2 * ns));
            c = c + cost(2 * t * r * di, t * di);
            (di, flops::scan_mamba1(t as usize, di as usize, ns as usize))
        }
        SsmVariant::Mamba2 => {
            let hs = cfg.ssm_heads as u64;
            c = c + cost(0, 2 * t * ns + t * hs);
            (hs, flops::scan_mamba2(t as usize, hs as usize, (di / hs) as usize, ns as usize))
        }
    };
    c = c + cost(t * dt_width + tr * t * dt_width, 2 * t * dt_width);
    c = c + cost(scan, t * di);
    // D skip, sum, SiLU gate, gating product.
    c = c + cost(t * di + t * di + tr * t * di + t * di, 4 * t * di);
    c + cost(2 * t * di * d + t * d, 2 * t * d)
}

/// Closed-form cost of a pre-fill forward over `m` video and `n` text
/// tokens, mirroring the implemented layer composition op for op.
pub fn analytic_cost(cfg: &HybridStackConfig, m: usize, n: usize) -> Result<Cost> {
    if n == 0 {
        return Err(Error::contract("pre-fill needs at least one text token"));
    }
    cfg.validate()?;
    let s = Shape { d: cfg.d as u64, h: cfg.n_heads as u64, vocab: cfg.vocab_size as u64 };
    let (mu, nu, d) = (m as u64, n as u64, s.d);
    let layers = cfg.n_layers as u64;
    let mut total = cost(0, nu * d);
    let per_layer = match cfg.arch {
        Arch::Baseline => {
            let t = mu + nu;
            if m > 0 {
                total = total + cost(0, (t + nu) * d);
            }
            s.ln(t) + s.self_attention(t) + cost(t * d, t * d) + s.mlp_residual(t)
        }
        Arch::Hybrid => {
            let mut c = s.ln(nu) + cost(TRANSCENDENTAL, 1) + s.self_attention(nu);
            if m > 0 {
                c = c + s.ln(mu) + cost(4 * mu * d * d, 2 * mu * d);
                c = c + cost(2 * nu * d * d, nu * d) + s.attend(nu, mu);
                c = c + cost(2 + 3 * nu * d, 1 + 3 * nu * d);
                if let Some(v) = cfg.block {
                    c = c + mamba_block(cfg, v, mu);
                }
            }
            c + cost(nu * d, nu * d) + s.mlp_residual(nu)
        }
    };
    for _ in 0..layers {
        total = total + per_layer;
    }
    Ok(total + s.ln(nu) + cost(2 * nu * d * s.vocab, nu * s.vocab))
}

/// FLOPs and node footprint counted by recording the model's pre-fill on a
/// tracing graph (shapes only, no values).
pub fn counted_cost(model: &Model, m: usize, n: usize) -> Result<Cost> {
    let mut g = Graph::new(Mode::Trace);
    let vars = model.bind(&mut g, &mut Binder::new());
    let video = g.placeholder(vec![m, model.config.d]);
    let text = vec![0; n];
    model.forward_graph(&mut g, &vars, video, &text)?;
    Ok(Cost { flops: g.flops(), memory: g.activation_values() })
}

/// Activation footprint of a training pre-fill, split by origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Every value the pre-fill keeps for the backward pass.
    pub total: u64,
    /// Pre-softmax score matrices: `layers·heads·(M+N)²` for the baseline,
    /// `layers·heads·(MN + N²)` for the hybrid.
    pub scores: u64,
    /// The hybrid's cross-attention share, `layers·heads·M·N`.
    pub cross_scores: u64,
    /// SSM states the scans keep for their backward passes: every layer's
    /// segment starts plus the one segment being replayed.
    pub ssm_states: u64,
}

/// Analytic activation memory of a training pre-fill: every recorded
/// intermediate plus the scans' checkpointed states.
pub fn memory_estimate(cfg: &HybridStackConfig, m: usize, n: usize) -> Result<MemoryEstimate> {
    let nodes = analytic_cost(cfg, m, n)?.memory;
    let (mu, nu) = (m as u64, n as u64);
    let lh = (cfg.n_layers * cfg.n_heads) as u64;
    let (scores, cross, states) = match cfg.arch {
        Arch::Baseline => (lh * (mu + nu) * (mu + nu), 0, 0),
        Arch::Hybrid => {
            let state = 2 * cfg.d as u64 * cfg.state_size() as u64;
            let states = match cfg.block {
                Some(_) if m > 0 => {
                    let replay = checkpoint_interval(m) as u64 + 1;
                    (cfg.n_layers as u64 * kept_states(m) as u64 + replay) * state
                }
                _ => 0,
            };
            (lh * (mu * nu + nu * nu), lh * mu * nu, states)
        }
    };
    Ok(MemoryEstimate { total: nodes + states, scores, cross_scores: cross, ssm_states: states })
}
