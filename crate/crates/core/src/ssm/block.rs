use rand::Rng as _;

use super::{causal_conv1d, hippo_init, selective_scan, SsmState, SsmVariant, CONV_WIDTH};
use crate::error::{Error, Result};
use crate::numerics::{join, Binder, Graph, Mode, Parameters, Rng, Tensor, Var};

/// Channel expansion of the block's inner width.
pub const EXPAND: usize = 2;
pub const LN_EPS: f64 = 1e-6;
const DT_MIN: f64 = 0.001;
const DT_MAX: f64 = 0.1;

/// Weights of one Mamba / Mamba-2 block.
///
/// Mamba projects `d → [x, z]`, then derives `(dt_low, B, C)` from the
/// convolved `x` through `x_proj` and lifts `dt_low` with `dt_proj`.
/// Mamba-2 projects `d → [x, z, B, C, dt]` in one matmul.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub variant: SsmVariant,
    pub d_model: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub n_heads: usize,
    pub dt_rank: usize,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub in_proj: Tensor,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub x_proj: Option<Tensor>,
    pub dt_proj: Option<Tensor>,
    pub dt_bias: Tensor,
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub out_proj: Tensor,
}

/// Inverse of softplus, so that `softplus(bias) = dt`.
fn inv_softplus(dt: f64) -> f64 {
    dt + (-(-dt).exp_m1()).ln()
}

impl SsmParams {
    /// `n_heads` applies to Mamba-2 only; Mamba runs a single head spanning
    /// every inner channel.
    pub fn new(variant: SsmVariant, d_model: usize, n_state: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if d_model == 0 || n_state == 0 {
            return Err(Error::contract("block width and state size must be positive"));
        }
        let d_inner = EXPAND * d_model;
        let n_heads = match variant {
            SsmVariant::Mamba1 => 1,
            SsmVariant::Mamba2 if n_heads > 0 && d_inner % n_heads == 0 => n_heads,
            SsmVariant::Mamba2 => {
                return Err(Error::contract(format!("{n_heads} heads do not divide {d_inner} inner channels")))
            }
        };
        let dt_rank = d_model.div_ceil(16);
        let in_std = 1.0 / (d_model as f64).sqrt();
        let inner_std = 1.0 / (d_inner as f64).sqrt();
        let conv_bound = 1.0 / (CONV_WIDTH as f64).sqrt();
        let dt_count = match variant {
            SsmVariant::Mamba1 => d_inner,
            SsmVariant::Mamba2 => n_heads,
        };

        let in_width = match variant {
            SsmVariant::Mamba1 => 2 * d_inner,
            SsmVariant::Mamba2 => 2 * d_inner + 2 * n_state + n_heads,
        };
        let in_proj = Tensor::randn(vec![d_model, in_width], in_std, rng);
        let conv_weight = Tensor::uniform(vec![d_inner, CONV_WIDTH], -conv_bound, conv_bound, rng);
        let (x_proj, dt_proj) = match variant {
            SsmVariant::Mamba1 => {
                let dt_bound = 1.0 / (dt_rank as f64).sqrt();
                (
                    Some(Tensor::randn(vec![d_inner, dt_rank + 2 * n_state], inner_std, rng)),
                    Some(Tensor::uniform(vec![dt_rank, d_inner], -dt_bound, dt_bound, rng)),
                )
            }
            SsmVariant::Mamba2 => (None, None),
        };
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let dt_bias = Tensor::vector((0..dt_count).map(|_| inv_softplus(rng.random_range(lo..hi).exp())).collect());
        let a_log = match variant {
            SsmVariant::Mamba1 => {
                let row: Vec<f64> = hippo_init(n_state).iter().map(|a| (-a).ln()).collect();
                Tensor::new(vec![d_inner, n_state], row.repeat(d_inner))?
            }
            SsmVariant::Mamba2 => Tensor::vector((0..n_heads).map(|_| rng.random_range(1.0f64..16.0).ln()).collect()),
        };
        let out_proj = Tensor::randn(vec![d_inner, d_model], inner_std, rng);

        Ok(Self {
            variant,
            d_model,
            d_inner,
            n_state,
            n_heads,
            dt_rank,
            ln_gain: Tensor::ones(vec![d_model]),
            ln_bias: Tensor::zeros(vec![d_model]),
            in_proj,
            conv_weight,
            conv_bias: Tensor::zeros(vec![d_inner]),
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip: Tensor::ones(vec![d_inner]),
            out_proj,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner / self.n_heads
    }

    pub fn initial_state(&self) -> SsmState {
        SsmState::zeros(self.n_heads, self.head_dim(), self.n_state)
    }

    /// Registers every weight on `g` under `prefix`.
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, prefix: &str) -> SsmVars {
        let mut bind = |name: &str, t: &Tensor| binder.bind(g, join(prefix, name), t);
        SsmVars {
            variant: self.variant,
            d_inner: self.d_inner,
            n_state: self.n_state,
            n_heads: self.n_heads,
            dt_rank: self.dt_rank,
            ln_gain: bind("ln.gain", &self.ln_gain),
            ln_bias: bind("ln.bias", &self.ln_bias),
            in_proj: bind("in_proj", &self.in_proj),
            conv_weight: bind("conv.weight", &self.conv_weight),
            conv_bias: bind("conv.bias", &self.conv_bias),
            x_proj: self.x_proj.as_ref().map(|t| bind("x_proj", t)),
            dt_proj: self.dt_proj.as_ref().map(|t| bind("dt_proj", t)),
            dt_bias: bind("dt_bias", &self.dt_bias),
            a_log: bind("a_log", &self.a_log),
            d_skip: bind("d_skip", &self.d_skip),
            out_proj: bind("out_proj", &self.out_proj),
        }
    }
}

impl Parameters for SsmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "ln.gain"), &self.ln_gain);
        f(&join(prefix, "ln.bias"), &self.ln_bias);
        f(&join(prefix, "in_proj"), &self.in_proj);
        f(&join(prefix, "conv.weight"), &self.conv_weight);
        f(&join(prefix, "conv.bias"), &self.conv_bias);
        if let Some(t) = &self.x_proj {
            f(&join(prefix, "x_proj"), t);
        }
        if let Some(t) = &self.dt_proj {
            f(&join(prefix, "dt_proj"), t);
        }
        f(&join(prefix, "dt_bias"), &self.dt_bias);
        f(&join(prefix, "a_log"), &self.a_log);
        f(&join(prefix, "d_skip"), &self.d_skip);
        f(&join(prefix, "out_proj"), &self.out_proj);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "ln.gain"), &mut self.ln_gain);
        f(&join(prefix, "ln.bias"), &mut self.ln_bias);
        f(&join(prefix, "in_proj"), &mut self.in_proj);
        f(&join(prefix, "conv.weight"), &mut self.conv_weight);
        f(&join(prefix, "conv.bias"), &mut self.conv_bias);
        if let Some(t) = &mut self.x_proj {
            f(&join(prefix, "x_proj"), t);
        }
        if let Some(t) = &mut self.dt_proj {
            f(&join(prefix, "dt_proj"), t);
        }
        f(&join(prefix, "dt_bias"), &mut self.dt_bias);
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "d_skip"), &mut self.d_skip);
        f(&join(prefix, "out_proj"), &mut self.out_proj);
    }
}

/// Graph handles for a bound [`SsmParams`].
#[derive(Clone, Debug)]
pub struct SsmVars {
    pub variant: SsmVariant,
    pub d_inner: usize,
    pub n_state: usize,
    pub n_heads: usize,
    pub dt_rank: usize,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub in_proj: Var,
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub x_proj: Option<Var>,
    pub dt_proj: Option<Var>,
    pub dt_bias: Var,
    pub a_log: Var,
    pub d_skip: Var,
    pub out_proj: Var,
}

/// Records the full block on `g`:
/// LN → in_proj → causal conv → SiLU → selective scan (+ D skip) → ⊙ SiLU(z)
/// → out_proj → residual.
///
/// The carried state is returned when values are materialized.
pub fn mamba_block_graph(g: &mut Graph, p: &SsmVars, x: Var, state: &SsmState) -> Result<(Var, Option<SsmState>)> {
    let di = p.d_inner;
    let n = p.n_state;
    let t_len = g.shape(x)[0];
    let xn = g.layer_norm(x, p.ln_gain, p.ln_bias, LN_EPS)?;
    let proj = g.matmul(xn, p.in_proj)?;
    let xi = g.slice_cols(proj, 0, di)?;
    let z = g.slice_cols(proj, di, di)?;
    let (conv, tail) = causal_conv1d(g, xi, p.conv_weight, p.conv_bias, &state.conv_tail)?;
    let u = g.silu(conv)?;
    let (b, c, dt_pre) = match (p.variant, p.x_proj, p.dt_proj) {
        (SsmVariant::Mamba1, Some(xw), Some(dw)) => {
            let xp = g.matmul(u, xw)?;
            let low = g.slice_cols(xp, 0, p.dt_rank)?;
            let b = g.slice_cols(xp, p.dt_rank, n)?;
            let c = g.slice_cols(xp, p.dt_rank + n, n)?;
            (b, c, g.matmul(low, dw)?)
        }
        (SsmVariant::Mamba2, None, None) => {
            let b = g.slice_cols(proj, 2 * di, n)?;
            let c = g.slice_cols(proj, 2 * di + n, n)?;
            (b, c, g.slice_cols(proj, 2 * di + 2 * n, p.n_heads)?)
        }
        _ => return Err(Error::contract("block weights do not match the block variant")),
    };
    let dt_pre = g.add_row(dt_pre, p.dt_bias)?;
    let dt = g.softplus(dt_pre)?;
    let (scan, h) = selective_scan(g, p.variant, u, dt, p.a_log, b, c, &state.h)?;
    let skip = g.mul_row(u, p.d_skip)?;
    let y = g.add(scan, skip)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    let out = g.matmul(y, p.out_proj)?;
    let res = g.add(x, out)?;
    let next = match (h, tail) {
        (Some(h), Some(conv_tail)) => Some(SsmState { h, conv_tail, position: state.position + t_len }),
        _ => None,
    };
    Ok((res, next))
}

/// Runs one block on concrete values. `x` is `[T, d]`.
pub fn mamba_block_forward(params: &SsmParams, x: &Tensor, state: &SsmState) -> Result<(Tensor, SsmState)> {
    match x.shape() {
        [_, d] if *d == params.d_model => {}
        s => return Err(Error::dim("mamba_block_forward", format!("expected [T, {}], got {s:?}", params.d_model))),
    }
    let mut g = Graph::new(Mode::Infer);
    let mut binder = Binder::new();
    let vars = params.bind(&mut g, &mut binder, "");
    let xv = g.constant(x.clone());
    let (y, next) = mamba_block_graph(&mut g, &vars, xv, state)?;
    let next = next.ok_or_else(|| Error::contract("inference graph did not produce a state"))?;
    Ok((g.value(y).clone(), next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{graph, rng};
    use crate::ssm::phi1;

    #[test]
    fn shapes_and_param_counts() {
        let mut r = rng(0);
        let m1 = SsmParams::new(SsmVariant::Mamba1, 64, 16, 1, &mut r).unwrap();
        assert_eq!((m1.d_inner, m1.dt_rank, m1.head_dim()), (128, 4, 128));
        let m2 = SsmParams::new(SsmVariant::Mamba2, 64, 64, 4, &mut r).unwrap();
        assert_eq!((m2.n_heads, m2.head_dim()), (4, 32));
        assert_eq!(m2.in_proj.shape(), [64, 2 * 128 + 2 * 64 + 4]);
        assert!(SsmParams::new(SsmVariant::Mamba2, 64, 64, 3, &mut r).is_err());
    }

    #[test]
    fn init_ranges() {
        let p = SsmParams::new(SsmVariant::Mamba1, 32, 16, 1, &mut rng(1)).unwrap();
        for b in p.dt_bias.data() {
            let dt = graph::softplus(*b);
            assert!((DT_MIN * (1.0 - 1e-9)..=DT_MAX * (1.0 + 1e-9)).contains(&dt), "{dt}");
        }
        assert_eq!(p.a_log.get2(5, 3), 4f64.ln());
        let p2 = SsmParams::new(SsmVariant::Mamba2, 32, 8, 4, &mut rng(1)).unwrap();
        assert!(p2.a_log.data().iter().all(|v| (0.0..16f64.ln()).contains(v)));
    }

    #[test]
    fn zero_out_proj_is_identity() {
        for variant in [SsmVariant::Mamba1, SsmVariant::Mamba2] {
            let mut r = rng(2);
            let mut p = SsmParams::new(variant, 8, 4, 2, &mut r).unwrap();
            p.out_proj = Tensor::zeros(p.out_proj.shape().to_vec());
            let x = Tensor::randn(vec![5, 8], 1.0, &mut r);
            let (y, s) = mamba_block_forward(&p, &x, &p.initial_state()).unwrap();
            assert_eq!(y, x);
            assert_eq!(s.position, 5);
        }
    }

    #[test]
    fn streaming_matches_monolithic() {
        for variant in [SsmVariant::Mamba1, SsmVariant::Mamba2] {
            let mut r = rng(3);
            let p = SsmParams::new(variant, 8, 4, 2, &mut r).unwrap();
            let x = Tensor::randn(vec![9, 8], 1.0, &mut r);
            let (full, _) = mamba_block_forward(&p, &x, &p.initial_state()).unwrap();
            let (a, s) = mamba_block_forward(&p, &x.slice_rows(0, 4).unwrap(), &p.initial_state()).unwrap();
            let (b, _) = mamba_block_forward(&p, &x.slice_rows(4, 5).unwrap(), &s).unwrap();
            assert_eq!(Tensor::concat_rows(&[&a, &b]).unwrap(), full);
        }
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    /// Straight-line scalar evaluation of a `d = 1` Mamba block over two tokens.
    fn unrolled(p: &SsmParams, xs: [f64; 2]) -> [f64; 2] {
        let di = p.d_inner;
        let n = p.n_state;
        let mut hist: Vec<Vec<f64>> = Vec::new();
        let mut h = vec![vec![0.0; n]; di];
        let mut out = [0.0; 2];
        for (t, &x) in xs.iter().enumerate() {
            // Layer norm of a single value is exactly the bias.
            let xn = p.ln_bias.data()[0];
            let proj: Vec<f64> = (0..2 * di).map(|j| xn * p.in_proj.get2(0, j)).collect();
            hist.push(proj[..di].to_vec());
            let mut u = vec![0.0; di];
            for c in 0..di {
                let mut acc = p.conv_bias.data()[c];
                for j in 0..CONV_WIDTH {
                    let src = t as isize + j as isize - (CONV_WIDTH as isize - 1);
                    if src >= 0 {
                        acc += p.conv_weight.get2(c, j) * hist[src as usize][c];
                    }
                }
                u[c] = silu(acc);
            }
            let xw = p.x_proj.as_ref().unwrap();
            let dw = p.dt_proj.as_ref().unwrap();
            let xp: Vec<f64> = (0..p.dt_rank + 2 * n).map(|j| (0..di).map(|c| u[c] * xw.get2(c, j)).sum()).collect();
            let mut y = 0.0;
            for c in 0..di {
                let pre: f64 = (0..p.dt_rank).map(|r| xp[r] * dw.get2(r, c)).sum::<f64>() + p.dt_bias.data()[c];
                let dt = graph::softplus(pre);
                let mut yc = 0.0;
                for k in 0..n {
                    let a = -p.a_log.get2(c, k).exp();
                    let b = xp[p.dt_rank + k];
                    let cc = xp[p.dt_rank + n + k];
                    h[c][k] = (dt * a).exp() * h[c][k] + dt * phi1(dt * a) * b * u[c];
                    yc += cc * h[c][k];
                }
                yc += p.d_skip.data()[c] * u[c];
                y += yc * silu(proj[di + c]) * p.out_proj.get2(c, 0);
            }
            out[t] = x + y;
        }
        out
    }

    #[test]
    fn one_channel_two_tokens_against_unrolled_oracle() {
        let mut r = rng(11);
        let mut p = SsmParams::new(SsmVariant::Mamba1, 1, 2, 1, &mut r).unwrap();
        // A non-trivial LN bias so the block sees a non-zero input.
        p.ln_bias = Tensor::vector(vec![0.7]);
        p.conv_bias = Tensor::vector(vec![0.1, -0.2]);
        let xs = [0.3, -1.1];
        let (y, _) =
            mamba_block_forward(&p, &Tensor::new(vec![2, 1], xs.to_vec()).unwrap(), &p.initial_state()).unwrap();
        let want = unrolled(&p, xs);
        for t in 0..2 {
            assert!((y.data()[t] - want[t]).abs() < 1e-12, "t={t}: {} vs {}", y.data()[t], want[t]);
        }
    }
}
