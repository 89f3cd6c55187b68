use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use svimo::backbone::{patchify, svimo_loss, unpatchify, AttentionMask, TokenSequence, MOTION, VIDEO};
use svimo::nn::{Adam, AdamConfig, Builder, ParamStore};
use svimo::rng::RngStream;
use svimo::synth_data::synth_vocab;
use svimo::{BackboneConfig, ShapeConfig, Svimo, SvimoInputs};

fn shape() -> ShapeConfig {
    ShapeConfig { frames: 5, height: 16, width: 16, ratios: [4, 4, 2], patch: 2, text_len: 4, latent_channels: 96 }
}

fn cfg(blocks: usize) -> BackboneConfig {
    BackboneConfig { d_model: 32, heads: 2, blocks, d_time: 32, ff_mult: 2 }
}

fn model(dtype: DType, blocks: usize) -> (ParamStore, Svimo) {
    let mut store = ParamStore::new(dtype);
    let mut rng = RngStream::new(11, "init");
    let s = shape();
    let m = {
        let mut b = Builder::new(&mut store, &mut rng, "svimo");
        Svimo::new(&mut b, &cfg(blocks), &s, s.latent_channels, synth_vocab().len()).unwrap()
    };
    (store, m)
}

fn randn(rng: &mut RngStream, shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_vec(rng.normal_vec(shape.iter().product()), shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn v32(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
    v32(a).iter().zip(v32(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Give the zero-initialized adaptive maps random values so blocks do work.
fn randomize_modulation(store: &ParamStore, seed: u64) {
    let mut rng = RngStream::new(seed, "perturb");
    for (name, var) in store.iter() {
        if name.contains("modulation") {
            let t = (randn(&mut rng, var.dims(), var.dtype()) * 0.05).unwrap();
            var.set(&t).unwrap();
        }
    }
}

struct Fixture {
    zv: Tensor,
    zi: Tensor,
    zm: Tensor,
    g: Tensor,
    ids: Tensor,
}

fn fixture(dtype: DType, batch: usize, seed: u64) -> Fixture {
    let s = shape();
    let [t, h, w] = s.latent_grid();
    let c = s.latent_channels;
    let mut rng = RngStream::new(seed, "data");
    let vocab = synth_vocab();
    let ids: Vec<u32> = (0..batch).flat_map(|_| vocab.encode("left spoon stir bowl", s.text_len).unwrap()).collect();
    Fixture {
        zv: randn(&mut rng, &[batch, t, h, w, c], dtype),
        zi: randn(&mut rng, &[batch, 1, h, w, c], dtype),
        zm: randn(&mut rng, &[batch, t, h, w, c], dtype),
        g: randn(&mut rng, &[batch, t, h, w, c], dtype),
        ids: Tensor::from_vec(ids, (batch, s.text_len), &Device::Cpu).unwrap(),
    }
}

impl Fixture {
    fn inputs<'a>(&'a self, ts: &'a [usize]) -> SvimoInputs<'a> {
        SvimoInputs { z_video: &self.zv, z_image: &self.zi, z_motion: &self.zm, guidance: &self.g, text_ids: &self.ids, timesteps: ts }
    }
}

#[test]
fn zero_gate_stack_is_identity() {
    let (_, m) = model(DType::F32, 4);
    let f = fixture(DType::F32, 2, 1);
    let ts = [3, 900];
    let seq = m.embed(&f.inputs(&ts)).unwrap();
    let e = m.embed_time(&ts, DType::F32).unwrap();
    let out = m.run_blocks(seq.clone(), &e, AttentionMask::Full).unwrap();
    assert_eq!(v32(&out.features), v32(&seq.features));
    assert_eq!(out.spans, seq.spans);
}

#[test]
fn spans_preserved_and_attention_rows_normalized() {
    let (store, m) = model(DType::F32, 3);
    randomize_modulation(&store, 2);
    let f = fixture(DType::F32, 1, 2);
    let ts = [10];
    let seq = m.embed(&f.inputs(&ts)).unwrap();
    let s = shape();
    let budget = svimo::token_budget(&s).unwrap();
    assert_eq!(seq.spans.total(), budget.total);
    assert_eq!(seq.spans.video.len(), budget.video);
    assert_eq!(seq.spans.motion.len(), budget.motion);
    let e = m.embed_time(&ts, DType::F32).unwrap();
    let out = m.run_blocks(seq.clone(), &e, AttentionMask::Full).unwrap();
    assert_eq!(out.spans, seq.spans);
    assert_eq!(out.features.dims(), seq.features.dims());
    let probs = m.blocks()[0].attention_probs(&seq, &e).unwrap();
    let sums = v32(&probs.sum(candle_core::D::Minus1).unwrap());
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
}

#[test]
fn permuting_video_tokens_permutes_outputs() {
    let (store, m) = model(DType::F64, 1);
    randomize_modulation(&store, 3);
    let f = fixture(DType::F64, 1, 3);
    let ts = [100];
    let seq = m.embed(&f.inputs(&ts)).unwrap();
    let e = m.embed_time(&ts, DType::F64).unwrap();
    let (i, j) = (seq.spans.video.start, seq.spans.video.start + 3);
    let swap = |t: &Tensor| -> Tensor {
        let n = t.dim(1).unwrap();
        let idx: Vec<u32> = (0..n).map(|k| if k == i { j } else if k == j { i } else { k } as u32).collect();
        t.index_select(&Tensor::new(idx, &Device::Cpu).unwrap(), 1).unwrap()
    };
    let swapped = TokenSequence { features: swap(&seq.features), spans: seq.spans.clone() };
    let a = m.blocks()[0].forward(&seq, &e, AttentionMask::Full).unwrap();
    let b = m.blocks()[0].forward(&swapped, &e, AttentionMask::Full).unwrap();
    assert!(max_abs(&swap(&a.features), &b.features) < 1e-10);
}

#[test]
fn full_attention_lets_video_reach_motion() {
    let (store, m) = model(DType::F32, 1);
    randomize_modulation(&store, 4);
    let f = fixture(DType::F32, 1, 4);
    let ts = [50];
    let seq = m.embed(&f.inputs(&ts)).unwrap();
    let e = m.embed_time(&ts, DType::F32).unwrap();
    let full = m.blocks()[0].forward(&seq, &e, AttentionMask::Full).unwrap();
    let local = m.blocks()[0].forward(&seq, &e, AttentionMask::ModalityLocal).unwrap();
    assert!(max_abs(&full.part(MOTION).unwrap(), &local.part(MOTION).unwrap()) > 1e-6);
}

#[test]
fn time_embedding_is_deterministic_and_collision_free() {
    let (_, m) = model(DType::F64, 1);
    let ts: Vec<usize> = (0..1000).collect();
    let e = m.embed_time(&ts, DType::F64).unwrap();
    let again = m.embed_time(&ts, DType::F64).unwrap();
    assert_eq!(v32(&e), v32(&again));
    let mut norms: Vec<f64> = e.sqr().unwrap().sum(1).unwrap().to_vec1().unwrap();
    norms.sort_by(f64::total_cmp);
    assert!(norms.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn text_embedding_position_isolation() {
    let (_, m) = model(DType::F32, 1);
    let vocab = synth_vocab();
    let l = shape().text_len;
    let enc = |p: &str| Tensor::from_vec(vocab.encode(p, l).unwrap(), (1, l), &Device::Cpu).unwrap();
    let a = m.embed_text(&enc("left spoon stir bowl")).unwrap();
    let b = m.embed_text(&enc("left spoon push bowl")).unwrap();
    for k in 0..l {
        let d = max_abs(&a.narrow(1, k, 1).unwrap(), &b.narrow(1, k, 1).unwrap());
        assert_eq!(d > 0.0, k == 2, "position {k}");
    }
    assert!(vocab.encode("", l).unwrap().iter().all(|&i| i == vocab.pad_id()));
    assert!(vocab.encode("left spoon juggle bowl", l).is_err());
}

#[test]
fn video_embedding_is_affine_in_the_noisy_latent() {
    let (_, m) = model(DType::F64, 1);
    let f = fixture(DType::F64, 1, 5);
    let zero_v = f.zv.zeros_like().unwrap();
    let zero_i = f.zi.zeros_like().unwrap();
    let two = (&f.zv * 2.0).unwrap();
    let lhs = (m.embed_video(&two, &f.zi).unwrap() - m.embed_video(&f.zv, &f.zi).unwrap()).unwrap();
    let rhs = (m.embed_video(&f.zv, &zero_i).unwrap() - m.embed_video(&zero_v, &zero_i).unwrap()).unwrap();
    assert!(max_abs(&lhs, &rhs) < 1e-10);
    let n = m.embed_video(&f.zv, &f.zi).unwrap().dim(1).unwrap();
    assert_eq!(n, svimo::token_budget(&shape()).unwrap().video);
    let base = m.video_embedder().positions().unwrap();
    let bias_only = m.video_embedder().project(&Tensor::cat(&[&zero_v, &zero_v], 4).unwrap()).unwrap();
    let zero_tokens = m.embed_video(&zero_v, &zero_i).unwrap();
    assert!(max_abs(&zero_tokens, &bias_only.broadcast_add(&base).unwrap()) < 1e-12);
}

#[test]
fn motion_embedding_distinguishes_channel_roles() {
    let (_, m) = model(DType::F32, 1);
    let f = fixture(DType::F32, 1, 6);
    let a = m.embed_motion(&f.zm, &f.g).unwrap();
    let b = m.embed_motion(&f.g, &f.zm).unwrap();
    assert!(max_abs(&a, &b) > 1e-6);
    let zero = m.embed_motion(&f.zm, &f.zm.zeros_like().unwrap()).unwrap();
    assert_eq!(zero.dim(1).unwrap(), svimo::token_budget(&shape()).unwrap().motion);
    assert!(m.embed_motion(&f.zm, &f.zi).is_err());
}

#[test]
fn project_out_locality_and_bias_only_zero_tokens() {
    let (store, m) = model(DType::F64, 1);
    let f = fixture(DType::F64, 1, 7);
    let ts = [20];
    let seq = m.embed(&f.inputs(&ts)).unwrap();
    let e = m.embed_time(&ts, DType::F64).unwrap();
    // At initialization the final shift is zero, so zero tokens map to the bias alone.
    let zero = TokenSequence { features: seq.features.zeros_like().unwrap(), spans: seq.spans.clone() };
    let (zv, zm) = m.project_out(&zero, &e).unwrap();
    assert_eq!(zv.dims(), f.zv.dims());
    assert_eq!(zm.dims(), f.zm.dims());
    let c = shape().latent_channels;
    let flat: Vec<f64> = zv.flatten_all().unwrap().to_vec1().unwrap();
    for (k, x) in flat.iter().enumerate() {
        assert_eq!(*x, flat[k % c]);
    }

    randomize_modulation(&store, 7);

    let (base, _) = m.project_out(&seq, &e).unwrap();
    let k = seq.spans.video.start + 5;
    let d = seq.features.dim(2).unwrap();
    let mut bump = vec![0f64; seq.features.elem_count()];
    for i in 0..d {
        bump[k * d + i] = if i % 2 == 0 { 1.0 } else { -0.5 };
    }
    let bumped = TokenSequence {
        features: (&seq.features + Tensor::from_vec(bump, seq.features.dims(), &Device::Cpu).unwrap()).unwrap(),
        spans: seq.spans.clone(),
    };
    let (moved, _) = m.project_out(&bumped, &e).unwrap();
    let diff: Vec<f64> = (moved - base).unwrap().abs().unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let [_, h, w] = shape().latent_grid();
    let (pw, p) = (w / 2, 2usize);
    let tok = 5usize;
    let (tt, ty, tx) = (tok / (h / p * pw), (tok / pw) % (h / p), tok % pw);
    for (idx, v) in diff.iter().enumerate() {
        let x = (idx / c) % w;
        let y = (idx / (c * w)) % h;
        let t = idx / (c * w * h);
        let inside = t == tt && y / p == ty && x / p == tx;
        if !inside {
            assert_eq!(*v, 0.0, "({t},{y},{x}) changed");
        }
    }
    assert!(diff.iter().any(|v| *v > 0.0));
}

#[test]
fn svimo_loss_arithmetic() {
    let f = fixture(DType::F64, 3, 8);
    let one = |t: &Tensor| (t + 1.0).unwrap();
    let l = svimo_loss(&one(&f.zv), &one(&f.zm), &f.zv, &f.zm).unwrap().to_scalar::<f64>().unwrap();
    assert!((l - 2.0).abs() < 1e-12);
    assert_eq!(svimo_loss(&f.zv, &f.zm, &f.zv, &f.zm).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
    let p = |t: &Tensor| t.index_select(&perm, 0).unwrap();
    let a = svimo_loss(&f.g, &f.zv, &f.zm, &f.zi.broadcast_as(f.zv.dims()).unwrap().contiguous().unwrap()).unwrap();
    let b = svimo_loss(&p(&f.g), &p(&f.zv), &p(&f.zm), &p(&f.zi.broadcast_as(f.zv.dims()).unwrap().contiguous().unwrap())).unwrap();
    assert!((a.to_scalar::<f64>().unwrap() - b.to_scalar::<f64>().unwrap()).abs() < 1e-12);
}

#[test]
fn forward_is_pure_finite_and_covers_every_weight() {
    let (store, m) = model(DType::F32, 2);
    let f = fixture(DType::F32, 2, 9);
    let ts = [999, 999];
    let (a, b) = m.forward(&f.inputs(&ts)).unwrap();
    let (a2, b2) = m.forward(&f.inputs(&ts)).unwrap();
    assert_eq!(v32(&a), v32(&a2));
    assert_eq!(v32(&b), v32(&b2));
    assert!(v32(&a).iter().chain(v32(&b).iter()).all(|x| x.is_finite()));

    let target = fixture(DType::F32, 2, 10);
    let ts = [5, 500];
    let (a, b) = m.forward(&f.inputs(&ts)).unwrap();
    let loss = svimo_loss(&a, &b, &target.zv, &target.zm).unwrap();
    let mut opt = Adam::new(AdamConfig { learning_rate: 1e-3, lr_warmup_steps: 0, ..AdamConfig::default() });
    opt.step(&store, &loss.backward().unwrap(), |_| true).unwrap();

    let (a, b) = m.forward(&f.inputs(&ts)).unwrap();
    let grads = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap().backward().unwrap();
    for (name, var) in store.iter() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name}: no gradient"));
        let n = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(n > 0.0, "{name}: zero gradient");
    }
}

#[test]
fn svimo_loss_weight_gradients_match_finite_differences() {
    let (store, m) = model(DType::F64, 1);
    randomize_modulation(&store, 12);
    let f = fixture(DType::F64, 1, 12);
    let target = fixture(DType::F64, 1, 13);
    let ts = [300];
    let eval = || {
        let (a, b) = m.forward(&f.inputs(&ts)).unwrap();
        svimo_loss(&a, &b, &target.zv, &target.zm).unwrap()
    };
    let grads = eval().backward().unwrap();
    let mut rng = RngStream::new(14, "pick");
    let vars: Vec<(&String, &Var)> = store.iter().collect();
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (name, var) = vars[rng.below(vars.len())];
        let n = var.elem_count();
        let k = rng.below(n);
        let flat: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let analytic: f64 = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[k];
        let h = 1e-5;
        let at = |delta: f64| {
            let mut v = flat.clone();
            v[k] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            eval().to_scalar::<f64>().unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        var.set(&Tensor::from_vec(flat, var.dims(), &Device::Cpu).unwrap()).unwrap();
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(e < 1e-4, "{name}[{k}]: analytic {analytic} numeric {numeric}");
        worst = worst.max(e);
    }
    assert!(worst.is_finite());
}

proptest! {
    #[test]
    fn patchify_round_trips(t in 1usize..3, hp in 1usize..3, wp in 1usize..3, c in 1usize..4, p in 1usize..3, seed in 0u64..100) {
        let (h, w) = (hp * p, wp * p);
        let mut rng = RngStream::new(seed, "p");
        let x = randn(&mut rng, &[2, t, h, w, c], DType::F32);
        let y = patchify(&x, p).unwrap();
        prop_assert_eq!(y.dims(), &[2, t * hp * wp, p * p * c]);
        let back = unpatchify(&y, [t, h, w], p, c).unwrap();
        prop_assert_eq!(v32(&back), v32(&x));
    }
}

#[test]
fn video_token_span_ordering() {
    let (_, m) = model(DType::F32, 1);
    let f = fixture(DType::F32, 1, 15);
    let seq = m.embed(&f.inputs(&[0])).unwrap();
    assert_eq!(seq.spans.text, 0..shape().text_len);
    assert_eq!(seq.spans.video.end, seq.spans.motion.start);
    assert_eq!(seq.part(VIDEO).unwrap().dim(1).unwrap(), seq.spans.video.len());
}
