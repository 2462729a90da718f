//! Dense tensors, reverse-mode autodiff and the finite-difference oracle.

pub mod fd;
pub mod flops;
pub mod graph;
pub mod params;
pub mod tensor;

pub use fd::{finite_diff_grad, gradient_check, max_relative_error};
pub use graph::{CustomOp, Gradients, Graph, Mode, Var};
pub use params::{join, Binder, Parameters};
pub use tensor::{layer_norm, matmul, matmul_nt, matmul_tn, softmax_rows, Mask, Tensor};

use rand::SeedableRng;

/// The one random generator threaded through every seeded computation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
