use super::config::{Arch, HybridStackConfig};
use crate::attention::{init_cross_from_self, AttentionParams, AttnVars};
use crate::error::Result;
use crate::numerics::{join, rng, Binder, Graph, Parameters, Rng, Tensor, Var};
use crate::ssm::{SsmParams, SsmVars};

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn new(d: usize) -> Self {
        Self { gain: Tensor::ones(vec![d]), bias: Tensor::zeros(vec![d]) }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder, prefix: &str) -> (Var, Var) {
        (b.bind(g, join(prefix, "gain"), &self.gain), b.bind(g, join(prefix, "bias"), &self.bias))
    }
}

/// Two-layer feed-forward with hidden width `4d` and GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        let h = 4 * d;
        Self {
            w1: Tensor::randn(vec![d, h], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(vec![h]),
            w2: Tensor::randn(vec![h, d], 1.0 / (h as f64).sqrt(), rng),
            b2: Tensor::zeros(vec![d]),
        }
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

/// One decoder layer. The baseline uses `ln1`, `self_attn`, `ln2`, `mlp`;
/// the hybrid adds `cross_attn`, `alpha` and (optionally) `mamba`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1: Norm,
    pub self_attn: AttentionParams,
    pub cross_attn: Option<AttentionParams>,
    /// Pre-sigmoid blend weight, `[1]`.
    pub alpha: Option<Tensor>,
    pub mamba: Option<SsmParams>,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl LayerParams {
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, p: &str) -> LayerVars {
        LayerVars {
            ln1: self.ln1.bind(g, binder, &join(p, "ln1")),
            self_attn: self.self_attn.bind(g, binder, &join(p, "self_attn")),
            cross_attn: self.cross_attn.as_ref().map(|c| c.bind(g, binder, &join(p, "cross_attn"))),
            alpha: self.alpha.as_ref().map(|a| binder.bind(g, join(p, "alpha"), a)),
            mamba: self.mamba.as_ref().map(|m| m.bind(g, binder, &join(p, "mamba"))),
            ln2: self.ln2.bind(g, binder, &join(p, "ln2")),
            mlp: MlpVars {
                w1: binder.bind(g, join(p, "mlp.w1"), &self.mlp.w1),
                b1: binder.bind(g, join(p, "mlp.b1"), &self.mlp.b1),
                w2: binder.bind(g, join(p, "mlp.w2"), &self.mlp.w2),
                b2: binder.bind(g, join(p, "mlp.b2"), &self.mlp.b2),
            },
        }
    }
}

impl Parameters for LayerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        if let Some(c) = &self.cross_attn {
            c.visit(&join(prefix, "cross_attn"), f);
        }
        if let Some(a) = &self.alpha {
            f(&join(prefix, "alpha"), a);
        }
        if let Some(m) = &self.mamba {
            m.visit(&join(prefix, "mamba"), f);
        }
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        if let Some(c) = &mut self.cross_attn {
            c.visit_mut(&join(prefix, "cross_attn"), f);
        }
        if let Some(a) = &mut self.alpha {
            f(&join(prefix, "alpha"), a);
        }
        if let Some(m) = &mut self.mamba {
            m.visit_mut(&join(prefix, "mamba"), f);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Whether a parameter path belongs to the layers the hybrid adds on top of
/// the baseline (cross-attention, Mamba, α). These are the only paths
/// trained in stage 1.
pub fn is_hybrid_only(path: &str) -> bool {
    path.contains(".cross_attn.") || path.contains(".mamba.") || path.ends_with(".alpha")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: HybridStackConfig,
    /// Seed the weights were drawn from.
    pub seed: u64,
    /// Text embedding table `[vocab, d]`, tied with the output head.
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln: Norm,
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "embed"), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_ln.visit(&join(prefix, "final_ln"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "embed"), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_ln.visit_mut(&join(prefix, "final_ln"), f);
    }
}

impl Model {
    /// Fresh weights. Baseline-shared weights are drawn first, so a hybrid
    /// and a baseline built from the same seed agree on every shared path.
    pub fn new(config: HybridStackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let d = config.d;
        let embed = Tensor::randn(vec![config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut r);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1: Norm::new(d),
                self_attn: AttentionParams::new(d, config.n_heads, &mut r)?,
                cross_attn: None,
                alpha: None,
                mamba: None,
                ln2: Norm::new(d),
                mlp: Mlp::new(d, &mut r),
            });
        }
        let mut model = Self { config: config.clone(), seed, embed, layers, final_ln: Norm::new(d) };
        if config.arch == Arch::Hybrid {
            model.add_hybrid_layers(&mut r)?;
        }
        Ok(model)
    }

    /// Builds a hybrid on top of a (possibly trained) baseline: shared paths
    /// are copied, cross-attention is copied from self-attention when
    /// `ca_from_sa` is set and drawn fresh otherwise, α starts at 0.5.
    pub fn hybrid_from_baseline(base: &Model, config: HybridStackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shared = HybridStackConfig { arch: Arch::Baseline, ..config.clone() };
        let base_shape = HybridStackConfig { arch: Arch::Baseline, ..base.config.clone() };
        if shared.d != base_shape.d
            || shared.n_layers != base_shape.n_layers
            || shared.n_heads != base_shape.n_heads
            || shared.vocab_size != base_shape.vocab_size
        {
            return Err(crate::error::Error::config("hybrid shape does not match the baseline it extends"));
        }
        let mut model = Self { config: HybridStackConfig { arch: Arch::Hybrid, ..config }, seed, ..base.clone() };
        for l in &mut model.layers {
            l.cross_attn = None;
            l.alpha = None;
            l.mamba = None;
        }
        model.add_hybrid_layers(&mut rng(seed))?;
        Ok(model)
    }

    fn add_hybrid_layers(&mut self, r: &mut Rng) -> Result<()> {
        let cfg = &self.config;
        for l in &mut self.layers {
            l.cross_attn = Some(if cfg.ca_from_sa {
                init_cross_from_self(&l.self_attn)
            } else {
                AttentionParams::new(cfg.d, cfg.n_heads, r)?
            });
            l.alpha = Some(Tensor::vector(vec![0.0]));
            l.mamba = match cfg.block {
                Some(v) => Some(SsmParams::new(v, cfg.d, cfg.state_size(), cfg.ssm_heads, r)?),
                None => None,
            };
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> ModelVars {
        let embed = binder.bind(g, "embed".into(), &self.embed);
        let layers = self.layers.iter().enumerate().map(|(i, l)| l.bind(g, binder, &format!("layers.{i}"))).collect();
        let final_ln = self.final_ln.bind(g, binder, "final_ln");
        ModelVars { arch: self.config.arch, embed, layers, final_ln }
    }

    /// Current blend weights `sigmoid(α_raw)` per layer (hybrid only).
    pub fn alphas(&self) -> Vec<f64> {
        self.layers.iter().filter_map(|l| l.alpha.as_ref().map(|a| crate::numerics::graph::sigmoid(a.item()))).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub self_attn: AttnVars,
    pub cross_attn: Option<AttnVars>,
    pub alpha: Option<Var>,
    pub mamba: Option<SsmVars>,
    pub ln2: (Var, Var),
    pub mlp: MlpVars,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub arch: Arch,
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_ln: (Var, Var),
}
