use crate::error::{Error, Result};
use crate::numerics::{flops, CustomOp, Graph, Mode, Tensor, Var};

/// Log-softmax of `xs` restricted to `idx`.
fn log_softmax_at(xs: &[f64], idx: &[usize]) -> Vec<f64> {
    let max = idx.iter().map(|&i| xs[i]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = idx.iter().map(|&i| (xs[i] - max).exp()).sum();
    let lz = z.ln();
    idx.iter().map(|&i| xs[i] - max - lz).collect()
}

fn check_targets(rows: usize, vocab: usize, targets: &[Option<usize>]) -> Result<usize> {
    if targets.len() != rows {
        return Err(Error::dim("lm_loss", format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(t) = targets.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::contract(format!("target {t} outside vocabulary of {vocab}")));
    }
    match targets.iter().flatten().count() {
        0 => Err(Error::contract("no supervised positions")),
        n => Ok(n),
    }
}

/// Mean cross-entropy over supervised rows; `None` rows are masked out.
pub fn lm_loss_value(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let (rows, vocab) = logits.dims2()?;
    let count = check_targets(rows, vocab, targets)?;
    let all: Vec<usize> = (0..vocab).collect();
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            total -= log_softmax_at(logits.row(r), &all)[*t];
        }
    }
    Ok(total / count as f64)
}

struct LmLossOp {
    targets: Vec<Option<usize>>,
    count: usize,
}

impl CustomOp for LmLossOp {
    fn name(&self) -> &'static str {
        "lm_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let (rows, vocab) = logits.dims2()?;
        let all: Vec<usize> = (0..vocab).collect();
        let scale = grad.item() / self.count as f64;
        let mut g = vec![0.0; rows * vocab];
        for (r, t) in self.targets.iter().enumerate() {
            if let Some(t) = t {
                let lp = log_softmax_at(logits.row(r), &all);
                let row = &mut g[r * vocab..(r + 1) * vocab];
                for (o, l) in row.iter_mut().zip(&lp) {
                    *o = l.exp() * scale;
                }
                row[*t] -= scale;
            }
        }
        Ok(vec![Some(Tensor::new(vec![rows, vocab], g)?)])
    }
}

/// Next-token cross-entropy, averaged over supervised positions.
/// `targets[r]` is the id row `r` should predict.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (rows, vocab) = match g.shape(logits) {
        [r, v] => (*r, *v),
        s => return Err(Error::dim("lm_loss", format!("expected [T, vocab], got {s:?}"))),
    };
    let count = check_targets(rows, vocab, targets)?;
    let value = match g.mode() {
        Mode::Trace => None,
        _ => Some(Tensor::vector(vec![lm_loss_value(g.value(logits), targets)?])),
    };
    let op = LmLossOp { targets: targets.to_vec(), count };
    g.custom(&[logits], vec![1], value, flops::cross_entropy(count, vocab), Box::new(op))
}

/// Indices of the `k` largest entries, ties broken towards the lower index.
pub fn top_k_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_distill(teacher: &[usize], student: &[usize], k: usize) -> Result<()> {
    if teacher != student || teacher.len() != 2 {
        return Err(Error::dim("distill_loss", format!("teacher {teacher:?} vs student {student:?}")));
    }
    if k == 0 {
        return Err(Error::contract("distillation needs k ≥ 1"));
    }
    if k > teacher[1] {
        return Err(Error::contract(format!("k = {k} exceeds vocabulary of {}", teacher[1])));
    }
    Ok(())
}

/// Per row: the teacher's top-k indices, and both distributions renormalized
/// over them as log-probabilities.
fn restricted(teacher: &Tensor, student: &Tensor, k: usize) -> Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    (0..teacher.rows())
        .map(|r| {
            let idx = top_k_indices(teacher.row(r), k);
            let lp = log_softmax_at(teacher.row(r), &idx);
            let lq = log_softmax_at(student.row(r), &idx);
            (idx, lp, lq)
        })
        .collect()
}

/// `KL(teacher ‖ student)` over the teacher's top-k indices, averaged over
/// rows.
pub fn distill_loss_value(teacher: &Tensor, student: &Tensor, k: usize) -> Result<f64> {
    check_distill(teacher.shape(), student.shape(), k)?;
    let rows = restricted(teacher, student, k);
    let total: f64 =
        rows.iter().map(|(_, lp, lq)| lp.iter().zip(lq).map(|(p, q)| p.exp() * (p - q)).sum::<f64>()).sum();
    Ok(total / teacher.rows() as f64)
}

struct DistillOp {
    k: usize,
}

impl CustomOp for DistillOp {
    fn name(&self) -> &'static str {
        "distill_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (teacher, student) = (inputs[0], inputs[1]);
        let (rows, vocab) = student.dims2()?;
        let scale = grad.item() / rows as f64;
        let mut g = vec![0.0; rows * vocab];
        for (r, (idx, lp, lq)) in restricted(teacher, student, self.k).into_iter().enumerate() {
            for ((&i, p), q) in idx.iter().zip(&lp).zip(&lq) {
                g[r * vocab + i] = (q.exp() - p.exp()) * scale;
            }
        }
        Ok(vec![None, Some(Tensor::new(vec![rows, vocab], g)?)])
    }
}

/// Top-k distillation loss. No gradient reaches the teacher.
pub fn distill_loss(g: &mut Graph, teacher: Var, student: Var, k: usize) -> Result<Var> {
    let ts = g.shape(teacher).to_vec();
    check_distill(&ts, g.shape(student), k)?;
    let value = match g.mode() {
        Mode::Trace => None,
        _ => Some(Tensor::vector(vec![distill_loss_value(g.value(teacher), g.value(student), k)?])),
    };
    let cost = (ts[0] * k) as u64 * (2 * flops::SOFTMAX + 3);
    g.custom(&[teacher, student], vec![1], value, cost, Box::new(DistillOp { k }))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract(format!("λ must be a finite non-negative number, got {lambda}")));
    }
    Ok(())
}

/// `lm + λ·distill`; λ = 0 returns `lm` itself.
pub fn combined_loss(g: &mut Graph, lm: Var, distill: Option<Var>, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    match distill {
        Some(d) if lambda != 0.0 => {
            let w = g.scale(d, lambda)?;
            g.add(lm, w)
        }
        _ => Ok(lm),
    }
}

pub fn combined_loss_value(lm: f64, distill: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(if lambda == 0.0 { lm } else { lm + lambda * distill })
}
