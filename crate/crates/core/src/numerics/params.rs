//! Named parameter trees and their registration on a [`Graph`].

use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// A structure owning named parameter tensors.
///
/// Paths are dot-separated (`layers.0.self_attn.wq`) and stable: they key
/// checkpoints, freeze predicates and optimizer state.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_parameters(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |p, t| {
            out.insert(p.to_string(), t.clone());
        });
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers parameters as graph leaves and remembers which leaf holds which
/// path, so gradients can be routed back after `backward`.
pub struct Binder<'a> {
    bound: Vec<(String, Var)>,
    trainable: Option<&'a dyn Fn(&str) -> bool>,
}

impl Default for Binder<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Binder<'a> {
    /// Every bound parameter requires a gradient.
    pub fn new() -> Self {
        Self { bound: Vec::new(), trainable: None }
    }

    /// Only paths accepted by `trainable` require a gradient; the rest enter
    /// the graph as constants.
    pub fn with_trainable(trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { bound: Vec::new(), trainable: Some(trainable) }
    }

    pub fn bind(&mut self, g: &mut Graph, path: String, t: &Tensor) -> Var {
        let train = self.trainable.is_none_or(|f| f(&path));
        let v = if train { g.param(t) } else { g.constant(t.clone()) };
        self.bound.push((path, v));
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Collects per-path adjoints, skipping paths without one.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound.iter().filter_map(|(p, v)| grads.take(*v).map(|t| (p.clone(), t))).collect()
    }
}
