//! The hybrid decoder stack and the joint-attention baseline: layer
//! composition, pre-fill, incremental decoding and checkpoints.
//!
//! Video tokens are continuous `[M, d]` inputs; text tokens are ids embedded
//! through a table tied with the output head. Only text positions produce
//! logits.

mod checkpoint;
mod config;
mod forward;
mod params;
mod sequence;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, load_parameters, save_checkpoint,
    CHECKPOINT_VERSION,
};
pub(crate) use config::parse_bool;
pub use config::{block_name, key_values, parse_block, Arch, HybridStackConfig};
pub use forward::{
    argmax, baseline_layer_forward, baseline_layer_graph, hybrid_layer_forward, hybrid_layer_graph, DecodeContext,
    ForwardOut, HybridLayerOut, LayerCache, LayerTaps, LN_EPS,
};
pub use params::{is_hybrid_only, LayerParams, LayerVars, Mlp, MlpVars, Model, ModelVars, Norm};
pub use sequence::{Prompt, Role, TokenSequence};

use crate::numerics::Parameters;

/// Parameter counts split by where they live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub total: usize,
    /// Paths shared with the baseline.
    pub shared: usize,
    pub cross_attention: usize,
    pub mamba: usize,
    pub alpha: usize,
}

impl Model {
    pub fn parameter_report(&self) -> ParameterReport {
        let mut r = ParameterReport { total: 0, shared: 0, cross_attention: 0, mamba: 0, alpha: 0 };
        self.visit("", &mut |path, t| {
            let n = t.len();
            r.total += n;
            if path.contains(".cross_attn.") {
                r.cross_attention += n;
            } else if path.contains(".mamba.") {
                r.mamba += n;
            } else if path.ends_with(".alpha") {
                r.alpha += n;
            } else {
                r.shared += n;
            }
        });
        r
    }
}
