use super::config::Arch;
use super::params::{LayerParams, LayerVars, MlpVars, Model, ModelVars};
use super::sequence::{Prompt, TokenSequence};
use crate::attention::{attend, blended_text_update, causal_self_attention, video_kv, AttnVars, VideoKVCache};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Binder, Graph, Mask, Mode, Tensor, Var};
use crate::ssm::{mamba_block_graph, SsmState};

pub const LN_EPS: f64 = 1e-5;

fn norm(g: &mut Graph, x: Var, ln: (Var, Var)) -> Result<Var> {
    g.layer_norm(x, ln.0, ln.1, LN_EPS)
}

fn mlp(g: &mut Graph, p: &MlpVars, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, p.w2)?;
    g.add_row(o, p.b2)
}

/// `x + MLP(LN2(x))`.
fn mlp_residual(g: &mut Graph, l: &LayerVars, x: Var) -> Result<Var> {
    let n = norm(g, x, l.ln2)?;
    let m = mlp(g, &l.mlp, n)?;
    g.add(x, m)
}

/// Values a layer exposes so decoding can pick up where pre-fill stopped.
#[derive(Clone, Copy, Debug)]
pub struct LayerTaps {
    /// LN1 of the video rows fed to cross-attention (hybrid, `M > 0`).
    pub video_norm: Option<Var>,
    /// LN1 of the rows that own self-attention keys: text rows for the
    /// hybrid, every row for the baseline.
    pub self_norm: Var,
}

/// Output of one hybrid layer: updated video and text rows, the carried SSM
/// state (when values are materialized) and the decode taps.
pub struct HybridLayerOut {
    pub video: Var,
    pub text: Var,
    pub state: Option<SsmState>,
    pub taps: LayerTaps,
}

/// Text rows: pre-LN → α-blended cross/self update → residual → pre-LN → MLP
/// → residual. Video rows go through the Mamba block only (or pass through
/// unchanged without one). Cross-attention reads the layer's input video.
pub fn hybrid_layer_graph(
    g: &mut Graph,
    l: &LayerVars,
    video: Var,
    text: Var,
    state: &SsmState,
) -> Result<HybridLayerOut> {
    let (cross, alpha_raw) = match (&l.cross_attn, l.alpha) {
        (Some(c), Some(a)) => (c, a),
        _ => return Err(Error::contract("hybrid layer is missing cross-attention or α")),
    };
    let m = g.shape(video)[0];
    let tn = norm(g, text, l.ln1)?;
    let (video_norm, kv) = if m > 0 {
        let vn = norm(g, video, l.ln1)?;
        (Some(vn), Some(video_kv(g, cross, vn)?))
    } else {
        (None, None)
    };
    let alpha = g.sigmoid(alpha_raw)?;
    let upd = blended_text_update(g, &l.self_attn, cross, alpha, kv, tn)?;
    let text_out = g.add(text, upd)?;
    let text_out = mlp_residual(g, l, text_out)?;
    let (video_out, next) = match &l.mamba {
        Some(p) if m > 0 => mamba_block_graph(g, p, video, state)?,
        _ => (video, (g.mode() != Mode::Trace).then(|| state.clone())),
    };
    Ok(HybridLayerOut { video: video_out, text: text_out, state: next, taps: LayerTaps { video_norm, self_norm: tn } })
}

/// Joint causal self-attention over `[video; text]` followed by the MLP,
/// both with residuals, on every row.
pub fn baseline_layer_graph(g: &mut Graph, l: &LayerVars, all: Var) -> Result<(Var, LayerTaps)> {
    let n = norm(g, all, l.ln1)?;
    let a = causal_self_attention(g, &l.self_attn, n)?;
    let x = g.add(all, a)?;
    let x = mlp_residual(g, l, x)?;
    Ok((x, LayerTaps { video_norm: None, self_norm: n }))
}

/// Everything a pre-fill graph produces.
pub struct ForwardOut {
    /// `[N, vocab]` next-token logits at every text position.
    pub logits: Var,
    pub taps: Vec<LayerTaps>,
    /// Final SSM state per layer (hybrid, materialized modes only).
    pub states: Vec<Option<SsmState>>,
}

impl Model {
    pub fn initial_states(&self) -> Vec<SsmState> {
        self.layers
            .iter()
            .map(|l| l.mamba.as_ref().map_or_else(|| SsmState::zeros(1, 1, 1), |m| m.initial_state()))
            .collect()
    }

    /// Records the full stack on `g`. `video` is `[M, d]`; text ids are
    /// embedded through the tied table.
    pub fn forward_graph(&self, g: &mut Graph, v: &ModelVars, video: Var, text: &[usize]) -> Result<ForwardOut> {
        if text.is_empty() {
            return Err(Error::contract("a sequence needs at least one text token"));
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let d = self.config.d;
        match g.shape(video) {
            [_, c] if *c == d => {}
            s => return Err(Error::dim("forward", format!("video must be [M, {d}], got {s:?}"))),
        }
        let m = g.shape(video)[0];
        let n = text.len();
        let mut taps = Vec::with_capacity(v.layers.len());
        let mut states = Vec::with_capacity(v.layers.len());
        let mut txt = g.gather_rows(v.embed, text)?;
        match v.arch {
            Arch::Hybrid => {
                let mut vid = video;
                for (lv, s0) in v.layers.iter().zip(self.initial_states()) {
                    let out = hybrid_layer_graph(g, lv, vid, txt, &s0)?;
                    vid = out.video;
                    txt = out.text;
                    taps.push(out.taps);
                    states.push(out.state);
                }
            }
            Arch::Baseline => {
                let mut all = if m > 0 { g.concat_rows(&[video, txt])? } else { txt };
                for lv in &v.layers {
                    let (x, t) = baseline_layer_graph(g, lv, all)?;
                    all = x;
                    taps.push(t);
                    states.push(None);
                }
                txt = if m > 0 { g.slice_rows(all, m, n)? } else { all };
            }
        }
        let h = norm(g, txt, v.final_ln)?;
        let logits = g.matmul_nt(h, v.embed)?;
        Ok(ForwardOut { logits, taps, states })
    }

    /// Text logits `[N, vocab]` for a prompt.
    pub fn logits(&self, prompt: &Prompt) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Infer);
        let v = self.bind(&mut g, &mut Binder::new());
        let video = g.constant(prompt.video.clone());
        let out = self.forward_graph(&mut g, &v, video, &prompt.text)?;
        Ok(g.value(out.logits).clone())
    }

    /// Pre-fill: logits at the last text position and the caches needed to
    /// continue generating.
    pub fn prefill(&self, prompt: &Prompt) -> Result<(Tensor, DecodeContext)> {
        let mut g = Graph::new(Mode::Infer);
        let v = self.bind(&mut g, &mut Binder::new());
        let video = g.constant(prompt.video.clone());
        let out = self.forward_graph(&mut g, &v, video, &prompt.text)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((l, taps), state) in self.layers.iter().zip(&out.taps).zip(out.states) {
            let sn = g.value(taps.self_norm);
            let video = match (taps.video_norm, &l.cross_attn) {
                (Some(vn), Some(c)) => Some(VideoKVCache::build(c, g.value(vn))?),
                _ => None,
            };
            layers.push(LayerCache {
                video,
                k: matmul(sn, &l.self_attn.wk)?,
                v: matmul(sn, &l.self_attn.wv)?,
                ssm: state.filter(|_| l.mamba.is_some()),
            });
        }
        let all = g.value(out.logits);
        let last = all.slice_rows(all.rows() - 1, 1)?.reshape(vec![self.config.vocab_size])?;
        let ctx = DecodeContext { layers, n_video: prompt.n_video(), n_text: prompt.text.len() };
        Ok((last, ctx))
    }

    /// Appends one generated text token. The cross branch reads the cached
    /// video keys, the self branch the cached text keys plus the new one; the
    /// Mamba state is untouched because generated tokens are text.
    pub fn decode_step(&self, mut ctx: DecodeContext, token: usize) -> Result<(Tensor, DecodeContext)> {
        if token >= self.config.vocab_size {
            return Err(Error::contract(format!("token id {token} outside vocabulary of {}", self.config.vocab_size)));
        }
        if ctx.layers.len() != self.layers.len() {
            return Err(Error::contract("decode context belongs to a different model"));
        }
        let mut g = Graph::new(Mode::Infer);
        let v = self.bind(&mut g, &mut Binder::new());
        let mut x = g.gather_rows(v.embed, &[token])?;
        for (lv, cache) in v.layers.iter().zip(&mut ctx.layers) {
            let xn = norm(&mut g, x, lv.ln1)?;
            let (sa, k_new, v_new) = cached_self_attention(&mut g, &lv.self_attn, xn, cache)?;
            let upd = match (self.config.arch, &lv.cross_attn, lv.alpha, &cache.video) {
                (Arch::Hybrid, Some(c), Some(a), Some(vc)) => {
                    let kc = g.constant(vc.k.clone());
                    let vcv = g.constant(vc.v.clone());
                    let q = g.matmul(xn, c.wq)?;
                    let ca = attend(&mut g, q, kc, vcv, c.wo, c.n_heads, &Mask::None)?;
                    let alpha = g.sigmoid(a)?;
                    let keep = g.affine(alpha, -1.0, 1.0)?;
                    let ca = g.scale_by(ca, keep)?;
                    let sa = g.scale_by(sa, alpha)?;
                    g.add(ca, sa)?
                }
                _ => sa,
            };
            x = g.add(x, upd)?;
            x = mlp_residual(&mut g, lv, x)?;
            cache.k = Tensor::concat_rows(&[&cache.k, g.value(k_new)])?;
            cache.v = Tensor::concat_rows(&[&cache.v, g.value(v_new)])?;
        }
        let h = norm(&mut g, x, v.final_ln)?;
        let logits = g.matmul_nt(h, v.embed)?;
        ctx.n_text += 1;
        let out = g.value(logits).clone().reshape(vec![self.config.vocab_size])?;
        Ok((out, ctx))
    }

    /// Greedy generation of `steps` tokens after `prompt`.
    pub fn generate(&self, prompt: &Prompt, steps: usize) -> Result<Vec<usize>> {
        let (mut logits, mut ctx) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = argmax(logits.data());
            out.push(t);
            if i + 1 < steps {
                (logits, ctx) = self.decode_step(ctx, t)?;
            }
        }
        Ok(out)
    }
}

fn cached_self_attention(g: &mut Graph, p: &AttnVars, xn: Var, cache: &LayerCache) -> Result<(Var, Var, Var)> {
    let q = g.matmul(xn, p.wq)?;
    let k = g.matmul(xn, p.wk)?;
    let v = g.matmul(xn, p.wv)?;
    let kc = g.constant(cache.k.clone());
    let vc = g.constant(cache.v.clone());
    let ks = g.concat_rows(&[kc, k])?;
    let vs = g.concat_rows(&[vc, v])?;
    Ok((attend(g, q, ks, vs, p.wo, p.n_heads, &Mask::None)?, k, v))
}

/// First index of the largest entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-layer decode caches.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// Cross-attention keys/values over the video (hybrid with `M > 0`).
    pub video: Option<VideoKVCache>,
    /// Self-attention keys/values: text positions for the hybrid, every
    /// position for the baseline.
    pub k: Tensor,
    pub v: Tensor,
    /// Final Mamba state after the video rows.
    pub ssm: Option<SsmState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeContext {
    pub layers: Vec<LayerCache>,
    pub n_video: usize,
    pub n_text: usize,
}

/// Runs one hybrid layer on concrete values.
pub fn hybrid_layer_forward(
    layer: &LayerParams,
    seq: &TokenSequence,
    state: &SsmState,
) -> Result<(TokenSequence, SsmState)> {
    let mut g = Graph::new(Mode::Infer);
    let lv = layer.bind(&mut g, &mut Binder::new(), "");
    let video = g.constant(seq.video());
    let text = g.constant(seq.text());
    let out = hybrid_layer_graph(&mut g, &lv, video, text, state)?;
    let next = TokenSequence::from_parts(g.value(out.video), g.value(out.text))?;
    Ok((next, out.state.unwrap_or_else(|| state.clone())))
}

/// Runs one baseline layer on concrete values.
pub fn baseline_layer_forward(layer: &LayerParams, seq: &TokenSequence) -> Result<TokenSequence> {
    let mut g = Graph::new(Mode::Infer);
    let lv = layer.bind(&mut g, &mut Binder::new(), "");
    let all = g.constant(seq.embeddings().clone());
    let (y, _) = baseline_layer_graph(&mut g, &lv, all)?;
    TokenSequence::new(g.value(y).clone(), &seq.roles())
}
