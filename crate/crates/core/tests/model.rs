use hybridseq::model::{
    baseline_layer_forward, decode_checkpoint, encode_checkpoint, hybrid_layer_forward, load_checkpoint,
    load_checkpoint_for, load_parameters, save_checkpoint, Arch, HybridStackConfig, LayerParams, Model, Prompt,
    TokenSequence, LN_EPS,
};
use hybridseq::numerics::{
    graph::gelu, layer_norm, matmul, matmul_nt, rng, softmax_rows, Binder, Graph, Mask, Mode, Parameters, Tensor,
};
use hybridseq::ssm::{mamba_block_forward, SsmVariant};
use hybridseq::Error;
use rand::Rng as _;

mod common;
use common::{jitter, prompt};

fn cfg(arch: Arch, block: Option<SsmVariant>, ca_from_sa: bool) -> HybridStackConfig {
    HybridStackConfig {
        d: 16,
        n_layers: 2,
        n_heads: 2,
        vocab_size: 24,
        block,
        ca_from_sa,
        arch,
        ssm_heads: 4,
        n_state: Some(4),
    }
}

fn all_configs() -> Vec<HybridStackConfig> {
    vec![
        cfg(Arch::Baseline, None, true),
        cfg(Arch::Hybrid, None, false),
        cfg(Arch::Hybrid, Some(SsmVariant::Mamba1), true),
        cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), true),
    ]
}

#[test]
fn text_prefix_ignores_text_suffix() {
    for c in all_configs() {
        for seed in 0..4 {
            let mut model = Model::new(c.clone(), seed).unwrap();
            jitter(&mut model, seed);
            let p = prompt(seed, 5, 6, c.d, c.vocab_size);
            let base = model.logits(&p).unwrap();
            for cut in 1..6 {
                let mut q = p.clone();
                for t in &mut q.text[cut..] {
                    *t = (*t + 7) % c.vocab_size;
                }
                let other = model.logits(&q).unwrap();
                assert_eq!(
                    base.slice_rows(0, cut).unwrap(),
                    other.slice_rows(0, cut).unwrap(),
                    "{:?} cut {cut}",
                    c.arch
                );
            }
        }
    }
}

#[test]
fn every_video_token_reaches_every_text_logit() {
    for c in all_configs() {
        let mut model = Model::new(c.clone(), 3).unwrap();
        jitter(&mut model, 3);
        let p = prompt(3, 6, 3, c.d, c.vocab_size);
        let base = model.logits(&p).unwrap();
        for i in 0..6 {
            let mut q = p.clone();
            q.video.data_mut()[i * c.d + 1] += 0.3;
            let y = model.logits(&q).unwrap();
            for j in 0..3 {
                assert_ne!(y.row(j), base.row(j), "{:?} video {i} text {j}", c.arch);
            }
        }
    }
}

#[test]
fn decode_matches_monolithic_prefill() {
    for c in all_configs() {
        for seed in 0..3 {
            let mut model = Model::new(c.clone(), seed).unwrap();
            jitter(&mut model, seed);
            let mut p = prompt(seed, 7, 3, c.d, c.vocab_size);
            let (mut logits, mut ctx) = model.prefill(&p).unwrap();
            assert_eq!(logits.shape(), &[c.vocab_size]);
            let video_before = ctx.layers.iter().map(|l| (l.video.clone(), l.ssm.clone())).collect::<Vec<_>>();
            let mut r = rng(seed + 100);
            for _ in 0..8 {
                let t = r.random_range(0..c.vocab_size);
                let n_before = ctx.n_text;
                (logits, ctx) = model.decode_step(ctx, t).unwrap();
                assert_eq!(ctx.n_text, n_before + 1);
                p.text.push(t);
                let mono = model.logits(&p).unwrap();
                let last = mono.slice_rows(p.text.len() - 1, 1).unwrap().reshape(vec![c.vocab_size]).unwrap();
                let diff = logits.max_abs_diff(&last);
                assert!(diff < 1e-10, "{:?} {:?} seed {seed}: {diff:e}", c.arch, c.block);
            }
            let video_after = ctx.layers.iter().map(|l| (l.video.clone(), l.ssm.clone())).collect::<Vec<_>>();
            assert_eq!(video_before, video_after);
        }
    }
}

#[test]
fn greedy_generation_matches_repeated_prefill() {
    for c in all_configs() {
        let model = Model::new(c.clone(), 11).unwrap();
        let p = prompt(11, 9, 2, c.d, c.vocab_size);
        let fast = model.generate(&p, 8).unwrap();
        let mut q = p.clone();
        let mut slow = Vec::new();
        for _ in 0..8 {
            let l = model.logits(&q).unwrap();
            let t = hybridseq::model::argmax(l.row(l.rows() - 1));
            slow.push(t);
            q.text.push(t);
        }
        assert_eq!(fast, slow, "{:?}", c.arch);
    }
}

#[test]
fn text_only_prompts_work_for_both_architectures() {
    for c in all_configs() {
        let model = Model::new(c.clone(), 2).unwrap();
        let p = prompt(2, 0, 4, c.d, c.vocab_size);
        let (logits, ctx) = model.prefill(&p).unwrap();
        let (next, _) = model.decode_step(ctx, 1).unwrap();
        assert!(logits.is_finite() && next.is_finite());
    }
}

fn loss_graph(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    p: &Prompt,
    w: &Tensor,
) -> hybridseq::Result<hybridseq::Var> {
    let v = model.bind(g, b);
    let video = g.constant(p.video.clone());
    let out = model.forward_graph(g, &v, video, &p.text)?;
    let wv = g.constant(w.clone());
    let prod = g.mul(out.logits, wv)?;
    g.sum(prod)
}

fn loss_value(model: &Model, p: &Prompt, w: &Tensor) -> f64 {
    let mut g = Graph::new(Mode::Infer);
    let l = loss_graph(model, &mut g, &mut Binder::new(), p, w).unwrap();
    g.value(l).item()
}

/// Two coordinates of every parameter tensor per seed are checked against
/// central differences; the full Jacobian is too large to sweep.
#[test]
fn full_model_gradient_matches_finite_differences() {
    let h = 1e-5;
    for seed in 0..20 {
        let c = HybridStackConfig {
            d: 32,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 12,
            block: Some(if seed % 2 == 0 { SsmVariant::Mamba2 } else { SsmVariant::Mamba1 }),
            ca_from_sa: false,
            arch: Arch::Hybrid,
            ssm_heads: 4,
            n_state: Some(4),
        };
        let mut model = Model::new(c.clone(), seed).unwrap();
        jitter(&mut model, seed);
        model.visit_mut("", &mut |path, t| {
            if path.ends_with("dt_bias") {
                *t = t.map(|_| 0.5);
            }
        });
        let p = prompt(seed, 5, 3, c.d, c.vocab_size);
        let w = Tensor::randn(vec![3, c.vocab_size], 1.0, &mut rng(seed + 7));
        let mut g = Graph::new(Mode::Train);
        let mut b = Binder::new();
        let loss = loss_graph(&model, &mut g, &mut b, &p, &w).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let ad = b.gradients(&mut grads);
        let mut r = rng(seed + 1000);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (path, t) in model.named_parameters() {
            for _ in 0..2 {
                let i = r.random_range(0..t.len());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.visit_mut("", &mut |q, x| {
                        if q == path {
                            x.data_mut()[i] += delta;
                        }
                    });
                    loss_value(&m, &p, &w)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = ad.get(&path).map_or(0.0, |g| g.data()[i]);
                worst = worst.max((a - fd).abs() / (fd.abs() + 1e-8));
                checked += 1;
            }
        }
        assert!(checked > 50);
        assert!(worst < 1e-3, "seed {seed}: {worst:e}");
    }
}

#[test]
fn parameter_count_identity() {
    for block in [None, Some(SsmVariant::Mamba1), Some(SsmVariant::Mamba2)] {
        for ca in [false, true] {
            let h = Model::new(cfg(Arch::Hybrid, block, ca), 1).unwrap();
            let b = Model::new(cfg(Arch::Baseline, block, ca), 1).unwrap();
            let rh = h.parameter_report();
            let rb = b.parameter_report();
            assert_eq!(rh.total, rb.total + rh.cross_attention + rh.mamba + rh.alpha);
            assert_eq!(rh.shared, rb.total);
            assert_eq!(rh.cross_attention, 2 * 4 * 16 * 16);
            assert_eq!(rh.alpha, 2);
            assert_eq!(rh.mamba == 0, block.is_none());
            assert_eq!(h.num_parameters(), rh.total);
        }
    }
}

#[test]
fn hybrid_shares_baseline_weights() {
    let base = Model::new(cfg(Arch::Baseline, None, true), 5).unwrap();
    let fresh = Model::new(cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), true), 5).unwrap();
    let built = Model::hybrid_from_baseline(&base, cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), true), 9).unwrap();
    let shared = base.named_parameters();
    for (path, t) in fresh.named_parameters().iter().chain(built.named_parameters().iter()) {
        if let Some(s) = shared.get(path) {
            assert_eq!(s, t, "{path}");
        }
    }
    for l in &built.layers {
        assert_eq!(l.cross_attn.as_ref(), Some(&l.self_attn));
    }
    let random = Model::hybrid_from_baseline(&base, cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), false), 9).unwrap();
    assert_ne!(random.layers[0].cross_attn.as_ref(), Some(&random.layers[0].self_attn));
    let mut wrong = cfg(Arch::Hybrid, None, true);
    wrong.vocab_size = 30;
    assert!(matches!(Model::hybrid_from_baseline(&base, wrong, 1), Err(Error::Config { .. })));
}

#[test]
fn construction_is_deterministic() {
    for c in all_configs() {
        assert_eq!(Model::new(c.clone(), 42).unwrap(), Model::new(c.clone(), 42).unwrap());
        assert_ne!(Model::new(c.clone(), 42).unwrap(), Model::new(c, 43).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, c) in all_configs().into_iter().enumerate() {
        let mut model = Model::new(c.clone(), 17).unwrap();
        jitter(&mut model, 17);
        let a = dir.path().join(format!("a{i}.ckpt"));
        let b = dir.path().join(format!("b{i}.ckpt"));
        save_checkpoint(&model, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, model);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let p = prompt(1, 4, 3, c.d, c.vocab_size);
        assert_eq!(model.logits(&p).unwrap(), loaded.logits(&p).unwrap());
        assert_eq!(load_checkpoint_for(&a, &c).unwrap(), model);
    }
}

#[test]
fn checkpoint_errors() {
    let c = cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), true);
    let model = Model::new(c.clone(), 3).unwrap();
    let bytes = encode_checkpoint(&model);

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    assert!(matches!(decode_checkpoint(&corrupt), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 5]), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(b"garbage"), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[8] = 99;
    assert!(matches!(decode_checkpoint(&version), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let mut wrong = c.clone();
    wrong.vocab_size = 32;
    assert!(matches!(load_checkpoint_for(&path, &wrong), Err(Error::Config { .. })));
    let mut target = Model::new(wrong, 3).unwrap();
    assert!(matches!(load_parameters(&mut target, model.named_parameters()), Err(Error::Config { .. })));
}

fn zero_out(layer: &mut LayerParams) {
    layer.self_attn.wo = layer.self_attn.wo.map(|_| 0.0);
    if let Some(c) = &mut layer.cross_attn {
        c.wo = c.wo.map(|_| 0.0);
    }
    if let Some(m) = &mut layer.mamba {
        m.out_proj = m.out_proj.map(|_| 0.0);
    }
    layer.mlp.w2 = layer.mlp.w2.map(|_| 0.0);
}

#[test]
fn zero_output_projections_make_layers_the_identity() {
    for c in all_configs() {
        let mut model = Model::new(c.clone(), 8).unwrap();
        let layer = &mut model.layers[0];
        zero_out(layer);
        let mut r = rng(8);
        let seq = TokenSequence::from_parts(
            &Tensor::randn(vec![4, c.d], 1.0, &mut r),
            &Tensor::randn(vec![1, c.d], 1.0, &mut r),
        )
        .unwrap();
        let out = match c.arch {
            Arch::Hybrid => {
                let state = model.initial_states().remove(0);
                hybrid_layer_forward(&model.layers[0], &seq, &state).unwrap().0
            }
            Arch::Baseline => baseline_layer_forward(&model.layers[0], &seq).unwrap(),
        };
        assert_eq!(out, seq, "{:?} {:?}", c.arch, c.block);
    }
}

#[test]
fn without_a_block_video_rows_pass_through() {
    let model = Model::new(cfg(Arch::Hybrid, None, true), 4).unwrap();
    let mut r = rng(4);
    let seq =
        TokenSequence::from_parts(&Tensor::randn(vec![5, 16], 1.0, &mut r), &Tensor::randn(vec![3, 16], 1.0, &mut r))
            .unwrap();
    let state = model.initial_states().remove(0);
    let (out, _) = hybrid_layer_forward(&model.layers[0], &seq, &state).unwrap();
    assert_eq!(out.video(), seq.video());
    assert_ne!(out.text(), seq.text());
}

fn mha(q: &Tensor, k: &Tensor, v: &Tensor, wo: &Tensor, heads: usize, mask: &Mask) -> Tensor {
    let d = q.cols();
    let hd = d / heads;
    let parts: Vec<Tensor> = (0..heads)
        .map(|h| {
            let s = matmul_nt(&q.slice_cols(h * hd, hd).unwrap(), &k.slice_cols(h * hd, hd).unwrap()).unwrap();
            let s = s.map(|x| 1.0 / (hd as f64).sqrt() * x + 0.0);
            let p = softmax_rows(&s, mask).unwrap();
            matmul(&p, &v.slice_cols(h * hd, hd).unwrap()).unwrap()
        })
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    matmul(&Tensor::concat_cols(&refs).unwrap(), wo).unwrap()
}

fn add_row(x: &Tensor, b: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> =
        (0..x.rows()).map(|i| x.row(i).iter().zip(b.data()).map(|(a, b)| a + b).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// One hybrid layer composed by hand from the Mamba block, tensor-level
/// attention and the MLP.
#[test]
fn hybrid_layer_equals_hand_composition() {
    for seed in 0..5 {
        let mut model = Model::new(cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), false), seed).unwrap();
        jitter(&mut model, seed);
        let l = &model.layers[0];
        let mut r = rng(seed);
        let video = Tensor::randn(vec![6, 16], 1.0, &mut r);
        let text = Tensor::randn(vec![3, 16], 1.0, &mut r);
        let seq = TokenSequence::from_parts(&video, &text).unwrap();
        let state = model.initial_states().remove(0);
        let (got, got_state) = hybrid_layer_forward(l, &seq, &state).unwrap();

        let (want_video, want_state) = mamba_block_forward(l.mamba.as_ref().unwrap(), &video, &state).unwrap();
        let tn = layer_norm(&text, &l.ln1.gain, &l.ln1.bias, LN_EPS).unwrap();
        let vn = layer_norm(&video, &l.ln1.gain, &l.ln1.bias, LN_EPS).unwrap();
        let sa_p = &l.self_attn;
        let ca_p = l.cross_attn.as_ref().unwrap();
        let sa = mha(
            &matmul(&tn, &sa_p.wq).unwrap(),
            &matmul(&tn, &sa_p.wk).unwrap(),
            &matmul(&tn, &sa_p.wv).unwrap(),
            &sa_p.wo,
            2,
            &Mask::Causal { offset: 0 },
        );
        let ca = mha(
            &matmul(&tn, &ca_p.wq).unwrap(),
            &matmul(&vn, &ca_p.wk).unwrap(),
            &matmul(&vn, &ca_p.wv).unwrap(),
            &ca_p.wo,
            2,
            &Mask::None,
        );
        let alpha = hybridseq::numerics::graph::sigmoid(l.alpha.as_ref().unwrap().item());
        let keep = -1.0 * alpha + 1.0;
        let upd = ca.zip_map(&sa, |c, s| keep * c + alpha * s).unwrap();
        let t1 = text.zip_map(&upd, |a, b| a + b).unwrap();
        let n2 = layer_norm(&t1, &l.ln2.gain, &l.ln2.bias, LN_EPS).unwrap();
        let hidden = add_row(&matmul(&n2, &l.mlp.w1).unwrap(), &l.mlp.b1).map(gelu);
        let m = add_row(&matmul(&hidden, &l.mlp.w2).unwrap(), &l.mlp.b2);
        let want_text = t1.zip_map(&m, |a, b| a + b).unwrap();

        assert_eq!(got.video(), want_video);
        assert_eq!(got.text(), want_text);
        assert_eq!(got_state, want_state);
    }
}

/// Joint-mask oracle: the baseline's text rows equal the attention path that
/// lets text see all video plus earlier text.
#[test]
fn baseline_mask_is_video_causal_and_text_sees_all_video() {
    let model = Model::new(cfg(Arch::Baseline, None, true), 6).unwrap();
    let l = &model.layers[0];
    let mut r = rng(6);
    let video = Tensor::randn(vec![5, 16], 1.0, &mut r);
    let text = Tensor::randn(vec![3, 16], 1.0, &mut r);
    let seq = TokenSequence::from_parts(&video, &text).unwrap();
    let got = baseline_layer_forward(l, &seq).unwrap();
    let mut dense = vec![false; 8 * 8];
    for i in 0..8 {
        for j in 0..=i {
            dense[i * 8 + j] = true;
        }
    }
    let n = layer_norm(seq.embeddings(), &l.ln1.gain, &l.ln1.bias, LN_EPS).unwrap();
    let p = &l.self_attn;
    let a = mha(
        &matmul(&n, &p.wq).unwrap(),
        &matmul(&n, &p.wk).unwrap(),
        &matmul(&n, &p.wv).unwrap(),
        &p.wo,
        2,
        &Mask::Dense(dense),
    );
    let x = seq.embeddings().zip_map(&a, |u, v| u + v).unwrap();
    let n2 = layer_norm(&x, &l.ln2.gain, &l.ln2.bias, LN_EPS).unwrap();
    let hidden = add_row(&matmul(&n2, &l.mlp.w1).unwrap(), &l.mlp.b1).map(gelu);
    let want = x.zip_map(&add_row(&matmul(&hidden, &l.mlp.w2).unwrap(), &l.mlp.b2), |u, v| u + v).unwrap();
    assert!(got.embeddings().max_abs_diff(&want) < 1e-13);
}

#[test]
fn forward_rejects_bad_inputs() {
    let c = cfg(Arch::Hybrid, Some(SsmVariant::Mamba2), true);
    let model = Model::new(c.clone(), 1).unwrap();
    let p = Prompt { video: Tensor::zeros(vec![2, c.d]), text: vec![c.vocab_size] };
    assert!(matches!(model.logits(&p), Err(Error::Contract(_))));
    let p = Prompt { video: Tensor::zeros(vec![2, c.d + 1]), text: vec![0] };
    assert!(model.logits(&p).is_err());
    assert!(Prompt::new(Tensor::zeros(vec![2, c.d]), vec![]).is_err());
}

#[test]
fn trace_mode_counts_without_values() {
    for c in all_configs() {
        let model = Model::new(c.clone(), 1).unwrap();
        let mut g = Graph::new(Mode::Trace);
        let v = model.bind(&mut g, &mut Binder::new());
        let video = g.placeholder(vec![64, c.d]);
        let out = model.forward_graph(&mut g, &v, video, &[0, 1, 2]).unwrap();
        assert_eq!(g.shape(out.logits), &[3, c.vocab_size]);
        assert!(g.try_value(out.logits).is_none());
        assert!(g.flops() > 0);
    }
}
