use candle_core::{DType, Tensor};
use svimo::config::{FeedbackMode, RunConfig};
use svimo::synth_data::{generate_dataset, SampleRecord};
use svimo::trainer::{PreparedSample, Trainer, JOINT_TRACE_WITH_GUIDANCE, JOINT_TRACE_ZERO_GUIDANCE};
use svimo::{Error, HandTrajectory, ObjectCloudSeq};

fn tiny() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.backbone.d_model = 32;
    c.model.backbone.d_time = 32;
    c.model.backbone.blocks = 1;
    c.model.backbone.heads = 2;
    c.model.vid.d_model = 32;
    c.model.vid.blocks = 1;
    c.model.vid.heads = 2;
    c.model.vid.visual_channels = 8;
    c.schedule.steps = 100;
    c.train.batch_size = 2;
    c.train.learning_rate = 1e-3;
    c.train.lr_warmup_steps = 0;
    c
}

fn setup(cfg: &RunConfig) -> (Trainer, Vec<SampleRecord>, Vec<PreparedSample>) {
    let mut tr = Trainer::new(cfg).unwrap();
    let recs = generate_dataset(21, 3, &cfg.synth()).unwrap();
    let refs: Vec<&SampleRecord> = recs.iter().collect();
    let s = tr.prepare(&refs).unwrap();
    (tr, recs, s)
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn weights(tr: &Trainer) -> Vec<(String, Vec<f64>)> {
    tr.store().iter().map(|(n, v)| (n.clone(), f64s(v.as_tensor()))).collect()
}

#[test]
fn warmup_first_loss_is_finite_positive_and_touches_only_vid() {
    let (mut tr, _, s) = setup(&tiny());
    let before = weights(&tr);
    let m = tr.warmup_step(&s).unwrap();
    assert!(m.loss.is_finite() && m.loss > 0.0);
    for ((name, a), (_, b)) in before.iter().zip(weights(&tr)) {
        assert_eq!(name.starts_with("vid"), *a != b, "{name}");
    }
}

#[test]
fn zero_learning_rate_is_inert() {
    let mut cfg = tiny();
    cfg.train.learning_rate = 0.0;
    let (mut tr, _, s) = setup(&cfg);
    let before = weights(&tr);
    let probe = tr.draw(s.len(), &s[0]).unwrap();
    let l0 = tr.joint_forward(&s, &probe, None).unwrap().total.to_scalar::<f64>().unwrap();
    for _ in 0..3 {
        tr.warmup_step(&s).unwrap();
        tr.joint_step(&s, None).unwrap();
    }
    assert_eq!(before, weights(&tr));
    let l1 = tr.joint_forward(&s, &probe, None).unwrap().total.to_scalar::<f64>().unwrap();
    assert_eq!(l0, l1);
}

#[test]
fn joint_training_starts_a_fresh_optimizer() {
    let mut cfg = tiny();
    cfg.train.lr_warmup_steps = 10;
    let (mut tr, _, s) = setup(&cfg);
    let first = tr.warmup_step(&s).unwrap().learning_rate;
    for _ in 0..4 {
        tr.warmup_step(&s).unwrap();
    }
    assert_eq!(tr.joint_step(&s, None).unwrap().learning_rate, first);
    assert!(tr.joint_step(&s, None).unwrap().learning_rate > first);
}

#[test]
fn loss_composition() {
    let (mut tr, _, s) = setup(&tiny());
    let d = tr.draw(s.len(), &s[0]).unwrap();
    let f = tr.joint_forward(&s, &d, None).unwrap();
    let ls = f.loss_svimo.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let lv = f.loss_vid.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let total = f.total.to_scalar::<f64>().unwrap();
    assert!((total - (ls + 0.05 * lv)).abs() < 1e-12);
    tr.set_loss_weights(1.0, 0.0);
    let f = tr.joint_forward(&s, &d, None).unwrap();
    assert_eq!(f.total.to_scalar::<f64>().unwrap(), ls);
}

#[test]
fn guidance_is_the_encoded_rendering_of_the_detached_prediction() {
    let (mut tr, _, s) = setup(&tiny());
    let d = tr.draw(s.len(), &s[0]).unwrap();
    let f = tr.joint_forward(&s, &d, None).unwrap();
    let (h, o) = (f.hands_tilde.as_ref().unwrap(), f.objects_tilde.as_ref().unwrap());
    let shapes = tr.config().shapes;
    for i in 0..h.dim(0).unwrap() {
        let hi = HandTrajectory::new(svimo::motion::tensor_to_array3(&h.get(i).unwrap()).unwrap()).unwrap();
        let oi = ObjectCloudSeq::new(svimo::motion::tensor_to_array3(&o.get(i).unwrap()).unwrap()).unwrap();
        let video = tr.render(&hi, &oi).unwrap();
        let scale = tr.config().model.latent_scale;
        let z = tr.codec().encode(&video, &shapes).unwrap().to_tensor(DType::F32).unwrap().affine(scale, 0.0).unwrap();
        assert_eq!(f64s(&z), f64s(&f.guidance.get(i).unwrap()));
    }
}

#[test]
fn feedback_modes_wire_the_two_paths() {
    let (mut tr, _, s) = setup(&tiny());
    let (full, _) = tr.vid_gradient_to_svimo(&s).unwrap();
    assert!(full > 0.0);

    tr.set_feedback_mode(FeedbackMode::GuidanceOnly);
    let (g, f) = tr.vid_gradient_to_svimo(&s).unwrap();
    assert_eq!(g, 0.0);
    assert!(f64s(&f.guidance).iter().any(|x| *x != 0.0));

    tr.set_feedback_mode(FeedbackMode::GradientOnly);
    let (g, f) = tr.vid_gradient_to_svimo(&s).unwrap();
    assert!(g > 0.0);
    assert!(f64s(&f.guidance).iter().all(|x| *x == 0.0));
    let mut trace = Vec::new();
    tr.joint_step(&s, Some(&mut trace)).unwrap();
    let ops: Vec<&str> = trace.iter().map(|e| e.op.as_str()).collect();
    assert_eq!(ops, JOINT_TRACE_ZERO_GUIDANCE);
    assert_eq!(trace[4].note, "attached");

    tr.set_feedback_mode(FeedbackMode::None);
    let (g, f) = tr.vid_gradient_to_svimo(&s).unwrap();
    assert_eq!(g, 0.0);
    assert!(f64s(&f.guidance).iter().all(|x| *x == 0.0));

    tr.set_feedback_mode(FeedbackMode::Full);
    let mut trace = Vec::new();
    tr.joint_step(&s, Some(&mut trace)).unwrap();
    let ops: Vec<&str> = trace.iter().map(|e| e.op.as_str()).collect();
    assert_eq!(ops, JOINT_TRACE_WITH_GUIDANCE);
    let b = tr.config().train.batch_size;
    assert_eq!(trace[0].shapes, vec![vec![b]]);
    assert_eq!(trace[1].shapes[2], vec![b, 9, 12, 3]);
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_trace() {
    let cfg = tiny();
    let (mut a, _, s) = setup(&cfg);
    for _ in 0..2 {
        a.warmup_step(&s).unwrap();
    }
    a.joint_step(&s, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.save_checkpoint(dir.path()).unwrap();
    let run = |t: &mut Trainer| -> Vec<u64> {
        (0..10)
            .map(|i| {
                let m = if i < 2 { t.warmup_step(&s) } else { t.joint_step(&s, None) }.unwrap();
                m.loss.to_bits()
            })
            .collect()
    };
    let straight = run(&mut a);
    let mut b = Trainer::load_checkpoint(dir.path(), None).unwrap();
    assert_eq!(run(&mut b), straight);
    assert_eq!(weights(&a), weights(&b));
}

#[test]
fn checkpoint_guards() {
    let cfg = tiny();
    let (tr, _, _) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    tr.save_checkpoint(dir.path()).unwrap();

    let mut other = cfg;
    other.model.vid.d_model = 64;
    match Trainer::load_checkpoint(dir.path(), Some(&other)) {
        Err(Error::ArchitectureMismatch { field, expected, found }) => {
            assert_eq!(field, "model.vid.d_model");
            assert_eq!((expected.as_str(), found.as_str()), ("64", "32"));
        }
        r => panic!("expected a mismatch, got {:?}", r.err()),
    }

    let w = dir.path().join("weights.svt");
    let bytes = std::fs::read(&w).unwrap();
    std::fs::write(&w, &bytes[..bytes.len() / 2]).unwrap();
    let e = Trainer::load_checkpoint(dir.path(), None).err().unwrap();
    assert_eq!(e.exit_code(), 3, "{e}");

    std::fs::remove_file(&w).unwrap();
    let e = Trainer::load_checkpoint(dir.path(), None).err().unwrap();
    assert_eq!(e.exit_code(), 5, "{e}");

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Trainer::load_checkpoint(empty.path(), None), Err(Error::MissingArtifact(_))));
}

#[test]
fn generation_contract() {
    let (tr, recs, _) = setup(&tiny());
    let r = &recs[0];
    let a = tr.generate(&r.image, &r.prompt, 4, 9).unwrap();
    let b = tr.generate(&r.image, &r.prompt, 4, 9).unwrap();
    let c = tr.generate(&r.image, &r.prompt, 4, 10).unwrap();
    assert_eq!(a.video, b.video);
    assert_eq!(a.hands, b.hands);
    assert_eq!(a.objects, b.objects);
    assert_ne!(a.hands, c.hands);
    assert_eq!(a.video.frames.dim(), (9, 32, 48, 3));
    assert_eq!(a.hands.joints.dim(), (9, 12, 3));
    assert_eq!(a.objects.points.dim(), (9, 32, 3));
    assert!(a.video.frames.iter().all(|x| x.is_finite()));
    assert!(a.hands.is_finite() && a.objects.is_finite());
    assert!(tr.generate(&r.image, "left spoon juggle bowl", 4, 9).is_err());
}

#[test]
fn out_of_range_timestep_is_rejected() {
    let (tr, _, s) = setup(&tiny());
    let one = svimo::trainer::Batch::from_samples(&[&s[0]]).unwrap();
    let e = tr.vid_forward(&one.hands, &one.objects, &[100], &one.z_video, &one.z_motion);
    assert!(matches!(e, Err(Error::Config(_))));
    assert!(tr.vid_forward(&one.hands, &one.objects, &[99], &one.z_video, &one.z_motion).is_ok());
}
