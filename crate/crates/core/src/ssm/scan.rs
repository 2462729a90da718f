use super::{phi1, phi1_prime, SsmState, SsmVariant};
use crate::error::{Error, Result};
use crate::numerics::{flops, CustomOp, Graph, Mode, Tensor, Var};

/// Per-token scan inputs. `dt` is already positive (after softplus).
///
/// | field | Mamba     | Mamba-2   |
/// |-------|-----------|-----------|
/// | `x`   | `[T, C]`  | `[T, C]`  |
/// | `dt`  | `[T, C]`  | `[T, H]`  |
/// | `b`   | `[T, N]`  | `[T, N]`  |
/// | `c`   | `[T, N]`  | `[T, N]`  |
///
/// `a_log` is `[C, N]` for Mamba and `[H]` for Mamba-2.
#[derive(Clone, Debug)]
pub struct SelectiveInputs {
    pub x: Tensor,
    pub dt: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    variant: SsmVariant,
    tokens: usize,
    channels: usize,
    n_state: usize,
    heads: usize,
    head_dim: usize,
}

impl Dims {
    fn state_len(&self) -> usize {
        self.channels * self.n_state
    }

    fn cost(&self) -> u64 {
        match self.variant {
            SsmVariant::Mamba1 => flops::scan_mamba1(self.tokens, self.channels, self.n_state),
            SsmVariant::Mamba2 => flops::scan_mamba2(self.tokens, self.heads, self.head_dim, self.n_state),
        }
    }
}

fn dims(variant: SsmVariant, x: &[usize], dt: &[usize], a_log: &[usize], b: &[usize], c: &[usize]) -> Result<Dims> {
    let bad = |detail: String| Error::dim("selective_scan", detail);
    let (tokens, channels) = match x {
        [t, ch] => (*t, *ch),
        s => return Err(bad(format!("x must be [T, C], got {s:?}"))),
    };
    let n_state = match b {
        [t, n] if *t == tokens => *n,
        s => return Err(bad(format!("b must be [{tokens}, N], got {s:?}"))),
    };
    if c != [tokens, n_state] {
        return Err(bad(format!("c must be [{tokens}, {n_state}], got {c:?}")));
    }
    let (heads, head_dim) = match variant {
        SsmVariant::Mamba1 => {
            if a_log != [channels, n_state] {
                return Err(bad(format!("a_log must be [{channels}, {n_state}], got {a_log:?}")));
            }
            if dt != [tokens, channels] {
                return Err(bad(format!("dt must be [{tokens}, {channels}], got {dt:?}")));
            }
            (1, channels)
        }
        SsmVariant::Mamba2 => {
            let heads = match a_log {
                [h] => *h,
                s => return Err(bad(format!("a_log must be [H], got {s:?}"))),
            };
            if heads == 0 || channels % heads != 0 {
                return Err(bad(format!("{channels} channels do not split into {heads} heads")));
            }
            if dt != [tokens, heads] {
                return Err(bad(format!("dt must be [{tokens}, {heads}], got {dt:?}")));
            }
            (heads, channels / heads)
        }
    };
    Ok(Dims { variant, tokens, channels, n_state, heads, head_dim })
}

fn decay_rates(a_log: &Tensor) -> Vec<f64> {
    a_log.data().iter().map(|v| -v.exp()).collect()
}

/// Tokens between kept states in a training scan. The backward pass
/// recomputes each segment from its starting state, so the scan keeps
/// `O(√T)` states instead of all `T + 1`.
pub fn checkpoint_interval(tokens: usize) -> usize {
    (tokens as f64).sqrt().ceil().max(1.0) as usize
}

/// Segment-start states a training scan keeps for its backward pass.
pub fn kept_states(tokens: usize) -> usize {
    tokens.div_ceil(checkpoint_interval(tokens))
}

struct Forward {
    y: Vec<f64>,
    h: Vec<f64>,
    /// The state before every `checkpoint_interval`-th token, kept only when a
    /// backward pass will need it.
    checkpoints: Option<Vec<f64>>,
}

struct Stream<'a> {
    d: Dims,
    a: Vec<f64>,
    xs: &'a [f64],
    dts: &'a [f64],
    bs: &'a [f64],
    cs: &'a [f64],
}

impl<'a> Stream<'a> {
    fn new(d: Dims, x: &'a Tensor, dt: &'a Tensor, a_log: &Tensor, b: &'a Tensor, c: &'a Tensor) -> Self {
        Stream { d, a: decay_rates(a_log), xs: x.data(), dts: dt.data(), bs: b.data(), cs: c.data() }
    }

    /// Advances `h` over token `t` and writes `y_t` into `y`.
    fn step(&self, t: usize, h: &mut [f64], y: &mut [f64], db: &mut [f64]) {
        let d = self.d;
        let (ch, n) = (d.channels, d.n_state);
        let (xs, dts, a) = (self.xs, self.dts, &self.a);
        let brow = &self.bs[t * n..(t + 1) * n];
        let crow = &self.cs[t * n..(t + 1) * n];
        match d.variant {
            SsmVariant::Mamba1 => {
                for c_i in 0..ch {
                    let dtv = dts[t * ch + c_i];
                    let xv = xs[t * ch + c_i];
                    let hs = &mut h[c_i * n..(c_i + 1) * n];
                    let arow = &a[c_i * n..(c_i + 1) * n];
                    let mut acc = 0.0;
                    for k in 0..n {
                        let z = dtv * arow[k];
                        let coef = dtv * phi1(z);
                        hs[k] = z.exp() * hs[k] + coef * brow[k] * xv;
                        acc += crow[k] * hs[k];
                    }
                    y[c_i] = acc;
                }
            }
            SsmVariant::Mamba2 => {
                for hh in 0..d.heads {
                    let dtv = dts[t * d.heads + hh];
                    let decay = (dtv * a[hh]).exp();
                    for (o, bv) in db.iter_mut().zip(brow) {
                        *o = dtv * bv;
                    }
                    for p in 0..d.head_dim {
                        let c_i = hh * d.head_dim + p;
                        let xv = xs[t * ch + c_i];
                        let hs = &mut h[c_i * n..(c_i + 1) * n];
                        let mut acc = 0.0;
                        for k in 0..n {
                            hs[k] = decay * hs[k] + db[k] * xv;
                            acc += crow[k] * hs[k];
                        }
                        y[c_i] = acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward(
    d: Dims,
    x: &Tensor,
    dt: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    h0: &[f64],
    keep: bool,
) -> Result<Forward> {
    let (t_len, ch) = (d.tokens, d.channels);
    let s = Stream::new(d, x, dt, a_log, b, c);
    let every = checkpoint_interval(t_len);
    let mut h = h0.to_vec();
    let mut y = vec![0.0; t_len * ch];
    let mut checkpoints = keep.then(|| Vec::with_capacity(t_len.div_ceil(every) * h.len()));
    let mut db = vec![0.0; d.n_state];
    for t in 0..t_len {
        if let Some(cp) = checkpoints.as_mut().filter(|_| t % every == 0) {
            cp.extend_from_slice(&h);
        }
        let yt = &mut y[t * ch..(t + 1) * ch];
        s.step(t, &mut h, yt, &mut db);
        if yt.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "selective_scan", token: Some(t) });
        }
    }
    Ok(Forward { y, h, checkpoints })
}

struct Adjoints {
    x: Vec<f64>,
    dt: Vec<f64>,
    a_log: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward(
    d: Dims,
    x: &Tensor,
    dt: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    checkpoints: &[f64],
    gy: &Tensor,
) -> Adjoints {
    let (t_len, ch, n) = (d.tokens, d.channels, d.n_state);
    let s_len = d.state_len();
    let stream = Stream::new(d, x, dt, a_log, b, c);
    let a = &stream.a;
    let (xs, dts, bs, cs, gys) = (x.data(), dt.data(), b.data(), c.data(), gy.data());
    let every = checkpoint_interval(t_len);
    let mut states = vec![0.0; (every + 1) * s_len];
    let mut scratch_y = vec![0.0; ch];
    let mut db = vec![0.0; n];
    let mut seg_start = usize::MAX;
    let mut out = Adjoints {
        x: vec![0.0; xs.len()],
        dt: vec![0.0; dts.len()],
        a_log: vec![0.0; a.len()],
        b: vec![0.0; bs.len()],
        c: vec![0.0; cs.len()],
    };
    let mut ga = vec![0.0; a.len()];
    // Adjoint of h_t, carried backwards through the decay.
    let mut gh = vec![0.0; s_len];
    for t in (0..t_len).rev() {
        let start = t - t % every;
        if start != seg_start {
            // Replays the segment from its kept state; the replay performs
            // the forward's arithmetic exactly, so states match bit for bit.
            seg_start = start;
            let seg = t_len.min(start + every) - start;
            states[..s_len].copy_from_slice(&checkpoints[(start / every) * s_len..(start / every + 1) * s_len]);
            for i in 0..seg {
                let (done, rest) = states.split_at_mut((i + 1) * s_len);
                rest[..s_len].copy_from_slice(&done[i * s_len..]);
                stream.step(start + i, &mut rest[..s_len], &mut scratch_y, &mut db);
            }
        }
        let local = t - start;
        let h_t = &states[(local + 1) * s_len..(local + 2) * s_len];
        let h_prev = &states[local * s_len..(local + 1) * s_len];
        let brow = &bs[t * n..(t + 1) * n];
        let crow = &cs[t * n..(t + 1) * n];
        let gb = &mut out.b[t * n..(t + 1) * n];
        let gc = &mut out.c[t * n..(t + 1) * n];
        match d.variant {
            SsmVariant::Mamba1 => {
                for c_i in 0..ch {
                    let dtv = dts[t * ch + c_i];
                    let xv = xs[t * ch + c_i];
                    let gyv = gys[t * ch + c_i];
                    let mut gdt = 0.0;
                    let mut gx = 0.0;
                    for k in 0..n {
                        let idx = c_i * n + k;
                        let av = a[idx];
                        let z = dtv * av;
                        let decay = z.exp();
                        let coef = dtv * phi1(z);
                        let g = gh[idx] + gyv * crow[k];
                        gc[k] += gyv * h_t[idx];
                        let g_decay = g * h_prev[idx];
                        let g_coef = g * brow[k] * xv;
                        gb[k] += g * coef * xv;
                        gx += g * coef * brow[k];
                        // d decay/d dt = decay·a, d coef/d dt = e^z
                        gdt += g_decay * decay * av + g_coef * decay;
                        // d decay/d a = decay·dt, d coef/d a = dt²·phi1'(z)
                        ga[idx] += g_decay * decay * dtv + g_coef * dtv * dtv * phi1_prime(z);
                        gh[idx] = g * decay;
                    }
                    out.dt[t * ch + c_i] += gdt;
                    out.x[t * ch + c_i] += gx;
                }
            }
            SsmVariant::Mamba2 => {
                for hh in 0..d.heads {
                    let dtv = dts[t * d.heads + hh];
                    let av = a[hh];
                    let decay = (dtv * av).exp();
                    let mut g_decay = 0.0;
                    let mut gdt = 0.0;
                    for p in 0..d.head_dim {
                        let c_i = hh * d.head_dim + p;
                        let xv = xs[t * ch + c_i];
                        let gyv = gys[t * ch + c_i];
                        let mut gx = 0.0;
                        for k in 0..n {
                            let idx = c_i * n + k;
                            let g = gh[idx] + gyv * crow[k];
                            gc[k] += gyv * h_t[idx];
                            g_decay += g * h_prev[idx];
                            gdt += g * brow[k] * xv;
                            gb[k] += g * dtv * xv;
                            gx += g * dtv * brow[k];
                            gh[idx] = g * decay;
                        }
                        out.x[t * ch + c_i] += gx;
                    }
                    out.dt[t * d.heads + hh] += gdt + g_decay * decay * av;
                    ga[hh] += g_decay * decay * dtv;
                }
            }
        }
    }
    // a = −exp(a_log) ⇒ da/da_log = a
    for ((o, g), av) in out.a_log.iter_mut().zip(&ga).zip(a) {
        *o = g * av;
    }
    out
}

struct ScanOp {
    dims: Dims,
    checkpoints: Option<Vec<f64>>,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let checkpoints = self
            .checkpoints
            .as_ref()
            .ok_or_else(|| Error::contract("selective_scan states were not kept for backward"))?;
        let adj = backward(self.dims, inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], checkpoints, grad);
        let shaped = |i: usize, v: Vec<f64>| Tensor::new(inputs[i].shape().to_vec(), v).map(Some);
        Ok(vec![shaped(0, adj.x)?, shaped(1, adj.dt)?, shaped(2, adj.a_log)?, shaped(3, adj.b)?, shaped(4, adj.c)?])
    }
}

/// Records the selective scan on a graph. Returns the output `[T, C]` and, when
/// values are materialized, the final hidden state.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    g: &mut Graph,
    variant: SsmVariant,
    x: Var,
    dt: Var,
    a_log: Var,
    b: Var,
    c: Var,
    h0: &Tensor,
) -> Result<(Var, Option<Tensor>)> {
    let d = dims(variant, g.shape(x), g.shape(dt), g.shape(a_log), g.shape(b), g.shape(c))?;
    if h0.len() != d.state_len() {
        return Err(Error::dim("selective_scan", format!("state has {} values, expected {}", h0.len(), d.state_len())));
    }
    let state_shape = vec![d.heads, d.head_dim, d.n_state];
    let out_shape = vec![d.tokens, d.channels];
    if g.mode() == Mode::Trace {
        let op = ScanOp { dims: d, checkpoints: None };
        let v = g.custom(&[x, dt, a_log, b, c], out_shape, None, d.cost(), Box::new(op))?;
        return Ok((v, None));
    }
    let keep = g.mode() == Mode::Train;
    let fwd = forward(d, g.value(x), g.value(dt), g.value(a_log), g.value(b), g.value(c), h0.data(), keep)?;
    let y = Tensor::new(out_shape.clone(), fwd.y)?;
    let h = Tensor::new(state_shape, fwd.h)?;
    let op = ScanOp { dims: d, checkpoints: fwd.checkpoints };
    let v = g.custom(&[x, dt, a_log, b, c], out_shape, Some(y), d.cost(), Box::new(op))?;
    Ok((v, Some(h)))
}

fn check_state(d: &Dims, state: &SsmState) -> Result<()> {
    if state.h.len() != d.state_len() {
        return Err(Error::dim("scan", format!("state has {} values, expected {}", state.h.len(), d.state_len())));
    }
    Ok(())
}

/// Exact left-to-right recurrence `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t`.
///
/// The returned state continues the stream: scanning `x₁‖x₂` equals scanning
/// `x₂` from the state left by `x₁`, bit for bit.
pub fn scan_sequential(
    variant: SsmVariant,
    a_log: &Tensor,
    inputs: &SelectiveInputs,
    state: &SsmState,
) -> Result<(Tensor, SsmState)> {
    let d = dims(variant, inputs.x.shape(), inputs.dt.shape(), a_log.shape(), inputs.b.shape(), inputs.c.shape())?;
    check_state(&d, state)?;
    let fwd = forward(d, &inputs.x, &inputs.dt, a_log, &inputs.b, &inputs.c, state.h.data(), false)?;
    let next = SsmState {
        h: Tensor::new(state.h.shape().to_vec(), fwd.h)?,
        conv_tail: state.conv_tail.clone(),
        position: state.position + d.tokens,
    };
    Ok((Tensor::new(vec![d.tokens, d.channels], fwd.y)?, next))
}

/// Chunked Mamba-2 scan.
///
/// Within a chunk of `L` tokens the output is the lower-triangular matrix
/// product `y = (CBᵀ ∘ decay) x` plus the decayed contribution of the state
/// entering the chunk; the state leaving the chunk is carried to the next.
/// Matches [`scan_sequential`] up to rounding.
pub fn scan_chunked_ssd(
    a_log: &Tensor,
    inputs: &SelectiveInputs,
    state: &SsmState,
    chunk: usize,
) -> Result<(Tensor, SsmState)> {
    if chunk == 0 {
        return Err(Error::contract("chunk size must be positive"));
    }
    let d = dims(
        SsmVariant::Mamba2,
        inputs.x.shape(),
        inputs.dt.shape(),
        a_log.shape(),
        inputs.b.shape(),
        inputs.c.shape(),
    )
    .map_err(|e| match e {
        Error::Dimension { detail, .. } => Error::contract(format!("chunked scan needs Mamba-2 inputs: {detail}")),
        other => other,
    })?;
    check_state(&d, state)?;
    let (t_len, ch, n, p_dim) = (d.tokens, d.channels, d.n_state, d.head_dim);
    let a = decay_rates(a_log);
    let (xs, dts, bs, cs) = (inputs.x.data(), inputs.dt.data(), inputs.b.data(), inputs.c.data());
    let mut h = state.h.data().to_vec();
    let mut y = vec![0.0; t_len * ch];
    let mut cb = vec![0.0; chunk * chunk];
    let mut cum = vec![0.0; chunk];

    for start in (0..t_len).step_by(chunk) {
        let len = chunk.min(t_len - start);
        // C_i · B_j for j ≤ i, shared by all heads.
        for i in 0..len {
            let crow = &cs[(start + i) * n..(start + i + 1) * n];
            for j in 0..=i {
                let brow = &bs[(start + j) * n..(start + j + 1) * n];
                cb[i * chunk + j] = crow.iter().zip(brow).map(|(c, b)| c * b).sum();
            }
        }
        for hh in 0..d.heads {
            let mut s = 0.0;
            for (i, cu) in cum.iter_mut().enumerate().take(len) {
                s += dts[(start + i) * d.heads + hh] * a[hh];
                *cu = s;
            }
            let channels = hh * p_dim..(hh + 1) * p_dim;
            for i in 0..len {
                let t = start + i;
                let crow = &cs[t * n..(t + 1) * n];
                let carry = cum[i].exp();
                for c_i in channels.clone() {
                    let hs = &h[c_i * n..(c_i + 1) * n];
                    y[t * ch + c_i] = carry * crow.iter().zip(hs).map(|(c, h)| c * h).sum::<f64>();
                }
                for j in 0..=i {
                    let w = cb[i * chunk + j] * (cum[i] - cum[j]).exp() * dts[(start + j) * d.heads + hh];
                    for c_i in channels.clone() {
                        y[t * ch + c_i] += w * xs[(start + j) * ch + c_i];
                    }
                }
            }
            let last = cum[len - 1];
            let end_decay = last.exp();
            for c_i in channels {
                for k in 0..n {
                    let mut acc = end_decay * h[c_i * n + k];
                    for j in 0..len {
                        let t = start + j;
                        acc += (last - cum[j]).exp() * dts[t * d.heads + hh] * bs[t * n + k] * xs[t * ch + c_i];
                    }
                    h[c_i * n + k] = acc;
                }
            }
        }
    }
    if let Some(t) = (0..t_len).find(|t| y[t * ch..(t + 1) * ch].iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { op: "scan_chunked_ssd", token: Some(t) });
    }
    let next = SsmState {
        h: Tensor::new(state.h.shape().to_vec(), h)?,
        conv_tail: state.conv_tail.clone(),
        position: state.position + t_len,
    };
    Ok((Tensor::new(vec![t_len, ch], y)?, next))
}
