use hybridseq::numerics::{
    finite_diff_grad, gradient_check, matmul, max_relative_error, rng, softmax_rows, Graph, Mask, Mode, Rng, Tensor,
    Var,
};
use hybridseq::Error;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Reduces `y` to a scalar with fixed random weights so no adjoint is
/// accidentally symmetric.
fn weighted_sum(g: &mut Graph, y: Var, r: &mut Rng) -> hybridseq::Result<Var> {
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, r);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = dyn Fn(&mut Graph, &[Var]) -> hybridseq::Result<Var>;

fn check_primitive(name: &str, shapes: &[Vec<usize>], positive: bool, op: &Build) {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                if positive {
                    Tensor::uniform(s.clone(), 0.5, 2.0, &mut r)
                } else {
                    Tensor::randn(s.clone(), 1.0, &mut r)
                }
            })
            .collect();
        let err = gradient_check(&inputs, H, |g, v| {
            let y = op(g, v)?;
            weighted_sum(g, y, &mut rng(1000 + seed))
        })
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let m = |r: usize, c: usize| vec![r, c];
    check_primitive("matmul", &[m(3, 4), m(4, 2)], false, &|g, v| g.matmul(v[0], v[1]));
    check_primitive("matmul_nt", &[m(3, 4), m(5, 4)], false, &|g, v| g.matmul_nt(v[0], v[1]));
    check_primitive("transpose", &[m(3, 4)], false, &|g, v| g.transpose(v[0]));
    check_primitive("add", &[m(3, 4), m(3, 4)], false, &|g, v| g.add(v[0], v[1]));
    check_primitive("sub", &[m(3, 4), m(3, 4)], false, &|g, v| g.sub(v[0], v[1]));
    check_primitive("mul", &[m(3, 4), m(3, 4)], false, &|g, v| g.mul(v[0], v[1]));
    check_primitive("add_row", &[m(3, 4), vec![4]], false, &|g, v| g.add_row(v[0], v[1]));
    check_primitive("mul_row", &[m(3, 4), vec![4]], false, &|g, v| g.mul_row(v[0], v[1]));
    check_primitive("affine", &[m(3, 4)], false, &|g, v| g.affine(v[0], -1.5, 0.25));
    check_primitive("scale", &[m(3, 4)], false, &|g, v| g.scale(v[0], 0.3));
    check_primitive("scale_by", &[m(3, 4), vec![1]], false, &|g, v| g.scale_by(v[0], v[1]));
    check_primitive("sigmoid", &[m(3, 4)], false, &|g, v| g.sigmoid(v[0]));
    check_primitive("silu", &[m(3, 4)], false, &|g, v| g.silu(v[0]));
    check_primitive("gelu", &[m(3, 4)], false, &|g, v| g.gelu(v[0]));
    check_primitive("softplus", &[m(3, 4)], false, &|g, v| g.softplus(v[0]));
    check_primitive("exp", &[m(3, 4)], false, &|g, v| g.exp(v[0]));
    check_primitive("ln", &[m(3, 4)], true, &|g, v| g.ln(v[0]));
    check_primitive("softmax", &[m(3, 5)], false, &|g, v| g.softmax_rows(v[0], Mask::None));
    check_primitive("softmax causal", &[m(4, 6)], false, &|g, v| g.softmax_rows(v[0], Mask::Causal { offset: 2 }));
    let bits: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    check_primitive("softmax dense", &[m(3, 4)], false, &move |g, v| g.softmax_rows(v[0], Mask::Dense(bits.clone())));
    check_primitive("layer_norm", &[m(3, 5), vec![5], vec![5]], false, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6));
    check_primitive("slice_rows", &[m(5, 3)], false, &|g, v| g.slice_rows(v[0], 1, 3));
    check_primitive("slice_cols", &[m(3, 5)], false, &|g, v| g.slice_cols(v[0], 2, 2));
    check_primitive("concat_rows", &[m(2, 3), m(1, 3)], false, &|g, v| g.concat_rows(&[v[0], v[1]]));
    check_primitive("concat_cols", &[m(2, 3), m(2, 1)], false, &|g, v| g.concat_cols(&[v[0], v[1]]));
    check_primitive("gather_rows", &[m(4, 3)], false, &|g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    check_primitive("sum", &[m(3, 4)], false, &|g, v| g.sum(v[0]));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(vec![2, 2]));
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let xv = Tensor::vector(vec![1.0, -2.0, 0.25]);
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&xv);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &xv.map(|v| 2.0 * v));
}

/// Cross-entropy of softmax logits: gradient is `p − onehot`, checked against
/// both the closed form and finite differences.
#[test]
fn cross_entropy_gradient_is_p_minus_onehot() {
    let target = 2;
    for seed in 0..SEEDS {
        let logits = Tensor::randn(vec![1, 5], 1.0, &mut rng(seed));
        let build = |g: &mut Graph, z: Var| -> hybridseq::Result<Var> {
            let p = g.softmax_rows(z, Mask::None)?;
            let pick = g.slice_cols(p, target, 1)?;
            let lp = g.ln(pick)?;
            let s = g.sum(lp)?;
            g.scale(s, -1.0)
        };
        let mut g = Graph::new(Mode::Train);
        let z = g.param(&logits);
        let loss = build(&mut g, z).unwrap();
        let ad = g.backward(loss).unwrap().get(z).unwrap().clone();

        let p = softmax_rows(&logits, &Mask::None).unwrap();
        let mut expected = p.clone();
        expected.data_mut()[target] -= 1.0;
        assert!(ad.max_abs_diff(&expected) < 1e-14);

        let fd = finite_diff_grad(
            |probe| {
                let mut g = Graph::new(Mode::Infer);
                let z = g.constant(probe.clone());
                let l = build(&mut g, z).unwrap();
                g.value(l).item()
            },
            &logits,
            H,
        );
        assert!(max_relative_error(&ad, &fd) < TOL);
    }
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&Tensor::ones(vec![2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_outside_train_mode_is_rejected() {
    let mut g = Graph::new(Mode::Infer);
    let x = g.constant(Tensor::ones(vec![2]));
    let s = g.sum(x).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn every_reachable_leaf_gets_a_matching_adjoint_and_backward_is_deterministic() {
    let mut r = rng(3);
    let mut g = Graph::new(Mode::Train);
    let a = g.param(&Tensor::randn(vec![3, 4], 1.0, &mut r));
    let b = g.param(&Tensor::randn(vec![4, 2], 1.0, &mut r));
    let unused = g.param(&Tensor::randn(vec![7], 1.0, &mut r));
    let c = g.constant(Tensor::randn(vec![3, 2], 1.0, &mut r));
    let ab = g.matmul(a, b).unwrap();
    let s = g.silu(ab).unwrap();
    let y = g.mul(s, c).unwrap();
    let loss = g.sum(y).unwrap();
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    for v in [a, b] {
        assert_eq!(first.get(v).unwrap().shape(), g.shape(v));
        assert_eq!(first.get(v), second.get(v));
    }
    assert!(first.get(c).is_none());
    assert!(first.get(unused).is_none());
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new(Mode::Infer);
    let x = g.constant(Tensor::vector(vec![1000.0]));
    assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    let z = g.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(g.ln(z), Err(Error::NonFinite { .. })));
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, H);
    assert!(g.max_abs_diff(&Tensor::vector(vec![2.0, 4.0])) < 1e-8);

    let c = finite_diff_grad(|_| 3.5, &x, H);
    assert!(c.data().iter().all(|v| v.abs() < 1e-12));

    // Stabilized logsumexp: its gradient is the softmax.
    let z = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]);
    let lse = |t: &Tensor| {
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + t.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let fd = finite_diff_grad(lse, &z, H);
    let p = softmax_rows(&z.clone().reshape(vec![1, 4]).unwrap(), &Mask::None).unwrap();
    assert!(fd.max_abs_diff(&p.reshape(vec![4]).unwrap()) < 1e-9);
}

#[test]
fn trace_mode_counts_without_values() {
    let mut g = Graph::new(Mode::Trace);
    let a = g.placeholder(vec![2, 3]);
    let b = g.placeholder(vec![3, 4]);
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), [2, 4]);
    assert_eq!(g.flops(), 48);
    assert!(g.try_value(c).is_none());
    assert_eq!(g.activation_values(), 8);
}

#[test]
fn masked_softmax_example() {
    let x = Tensor::from_rows(&[vec![5.0, 100.0]]).unwrap();
    let p = softmax_rows(&x, &Mask::Dense(vec![true, false])).unwrap();
    assert_eq!(p.data(), &[1.0, 0.0]);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7), causal in any::<bool>()) {
        let mask = if causal { Mask::Causal { offset: 0 } } else { Mask::None };
        let p = softmax_rows(&x, &mask).unwrap();
        for i in 0..4 {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            for (j, v) in row.iter().enumerate() {
                if !mask.allows(i, j, 7) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
    }
}
