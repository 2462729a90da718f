//! Multi-head attention: causal self-attention, the joint video+text causal
//! attention of the baseline, cross-attention from text queries to video
//! keys/values, and the α-blended text update of the hybrid.
//!
//! No positional encoding is applied; order reaches the text path through
//! the causal mask only.

use crate::error::{Error, Result};
use crate::numerics::{join, Binder, Graph, Mask, Mode, Parameters, Rng, Tensor, Var};

/// Query/key/value/output projections, all `[d, d]`, without biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn new(d: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::contract(format!("width {d} is not divisible by {n_heads} heads")));
        }
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            n_heads,
            wq: Tensor::randn(vec![d, d], std, rng),
            wk: Tensor::randn(vec![d, d], std, rng),
            wv: Tensor::randn(vec![d, d], std, rng),
            wo: Tensor::randn(vec![d, d], std, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, prefix: &str) -> AttnVars {
        AttnVars {
            n_heads: self.n_heads,
            wq: binder.bind(g, join(prefix, "wq"), &self.wq),
            wk: binder.bind(g, join(prefix, "wk"), &self.wk),
            wv: binder.bind(g, join(prefix, "wv"), &self.wv),
            wo: binder.bind(g, join(prefix, "wo"), &self.wo),
        }
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub n_heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Cross-attention keys and values over the video tokens, projected once
/// per sequence and read-only during decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoKVCache {
    pub k: Tensor,
    pub v: Tensor,
}

impl VideoKVCache {
    pub fn build(params: &AttentionParams, video: &Tensor) -> Result<Self> {
        Ok(Self { k: crate::numerics::matmul(video, &params.wk)?, v: crate::numerics::matmul(video, &params.wv)? })
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Copies every self-attention projection into a fresh cross-attention set.
pub fn init_cross_from_self(self_params: &AttentionParams) -> AttentionParams {
    self_params.clone()
}

/// Scaled per-head scores `q_h k_hᵀ / √head_dim` of already projected
/// queries and keys.
pub fn head_scores(g: &mut Graph, q: Var, k: Var, n_heads: usize, head: usize) -> Result<Var> {
    let d = g.shape(q)[1];
    let hd = d / n_heads;
    let qh = g.slice_cols(q, head * hd, hd)?;
    let kh = g.slice_cols(k, head * hd, hd)?;
    let s = g.matmul_nt(qh, kh)?;
    g.scale(s, 1.0 / (hd as f64).sqrt())
}

/// Multi-head attention of projected `q: [Lq, d]` over `k, v: [Lk, d]`,
/// followed by the output projection.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, wo: Var, n_heads: usize, mask: &Mask) -> Result<Var> {
    let d = g.shape(q)[1];
    if d % n_heads != 0 || g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(Error::dim("attention", format!("width {d} with {n_heads} heads")));
    }
    let hd = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let s = head_scores(g, q, k, n_heads, h)?;
        let p = g.softmax_rows(s, mask.clone())?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        heads.push(g.matmul(p, vh)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(o, wo)
}

/// Causal multi-head self-attention over `x: [L, d]`.
pub fn causal_self_attention(g: &mut Graph, p: &AttnVars, x: Var) -> Result<Var> {
    if g.shape(x)[0] == 0 {
        return Err(Error::contract("self-attention needs at least one token"));
    }
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    attend(g, q, k, v, p.wo, p.n_heads, &Mask::Causal { offset: 0 })
}

/// Text path of the baseline: text token `j` attends to every video token
/// and to text tokens `0..=j`.
pub fn joint_causal_attention_text(g: &mut Graph, p: &AttnVars, video: Var, text: Var) -> Result<Var> {
    let m = g.shape(video)[0];
    if m == 0 {
        return causal_self_attention(g, p, text);
    }
    let all = g.concat_rows(&[video, text])?;
    let q = g.matmul(text, p.wq)?;
    let k = g.matmul(all, p.wk)?;
    let v = g.matmul(all, p.wv)?;
    attend(g, q, k, v, p.wo, p.n_heads, &Mask::Causal { offset: m })
}

/// Projects video tokens to cross-attention keys and values.
pub fn video_kv(g: &mut Graph, p: &AttnVars, video: Var) -> Result<(Var, Var)> {
    Ok((g.matmul(video, p.wk)?, g.matmul(video, p.wv)?))
}

/// Every text query attends to all video keys; no mask.
pub fn cross_attention(g: &mut Graph, p: &AttnVars, text: Var, k: Var, v: Var) -> Result<Var> {
    if g.shape(k)[0] == 0 {
        return Err(Error::contract("cross-attention over an empty video cache; text-only input must bypass it"));
    }
    let q = g.matmul(text, p.wq)?;
    attend(g, q, k, v, p.wo, p.n_heads, &Mask::None)
}

/// `(1 − α)·cross + α·self` with a single scalar `alpha: [1]` (already in
/// [0, 1]). With no video keys the cross term is undefined and the self
/// branch is returned alone.
pub fn blended_text_update(
    g: &mut Graph,
    self_p: &AttnVars,
    cross_p: &AttnVars,
    alpha: Var,
    video_kv: Option<(Var, Var)>,
    text: Var,
) -> Result<Var> {
    let sa = causal_self_attention(g, self_p, text)?;
    let (k, v) = match video_kv {
        Some((k, v)) if g.shape(k)[0] > 0 => (k, v),
        _ => return Ok(sa),
    };
    let ca = cross_attention(g, cross_p, text, k, v)?;
    let keep = g.affine(alpha, -1.0, 1.0)?;
    let ca = g.scale_by(ca, keep)?;
    let sa = g.scale_by(sa, alpha)?;
    g.add(ca, sa)
}

fn eval_scores(build: impl FnOnce(&mut Graph) -> Result<Vec<Var>>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new(Mode::Infer);
    let vars = build(&mut g)?;
    Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Per-head cross-attention scores `[N, M]` before the softmax.
pub fn cross_scores(params: &AttentionParams, text: &Tensor, video: &Tensor) -> Result<Vec<Tensor>> {
    eval_scores(|g| {
        let t = g.constant(text.clone());
        let vid = g.constant(video.clone());
        let wq = g.constant(params.wq.clone());
        let wk = g.constant(params.wk.clone());
        let q = g.matmul(t, wq)?;
        let k = g.matmul(vid, wk)?;
        (0..params.n_heads).map(|h| head_scores(g, q, k, params.n_heads, h)).collect()
    })
}

/// Per-head text rows `[N, M + N]` of the baseline's joint score matrix
/// before masking and softmax.
pub fn joint_text_scores(params: &AttentionParams, video: &Tensor, text: &Tensor) -> Result<Vec<Tensor>> {
    eval_scores(|g| {
        let t = g.constant(text.clone());
        let vid = g.constant(video.clone());
        let all = g.concat_rows(&[vid, t])?;
        let wq = g.constant(params.wq.clone());
        let wk = g.constant(params.wk.clone());
        let q = g.matmul(t, wq)?;
        let k = g.matmul(all, wk)?;
        (0..params.n_heads).map(|h| head_scores(g, q, k, params.n_heads, h)).collect()
    })
}
