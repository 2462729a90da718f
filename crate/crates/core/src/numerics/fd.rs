//! Central finite differences, the gradient oracle for the autodiff tape.

use super::graph::{Graph, Mode, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Largest elementwise `|a − f| / (|f| + 1e-8)`.
pub fn max_relative_error(autodiff: &Tensor, fd: &Tensor) -> f64 {
    autodiff.data().iter().zip(fd.data()).map(|(a, f)| (a - f).abs() / (f.abs() + 1e-8)).fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar-valued graph builder against finite
/// differences, one input at a time. Returns the worst relative error over all
/// inputs.
///
/// `build` receives a fresh graph and one leaf per entry of `inputs` and must
/// return a one-element loss node.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Mode::Infer);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let ad = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let mut failure = None;
        let fd = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs).unwrap_or_else(|e| {
                    failure = Some(e.to_string());
                    f64::NAN
                })
            },
            x,
            h,
        );
        if let Some(msg) = failure {
            return Err(Error::contract(format!("finite-difference probe failed: {msg}")));
        }
        worst = worst.max(max_relative_error(&ad, &fd));
    }
    Ok(worst)
}
