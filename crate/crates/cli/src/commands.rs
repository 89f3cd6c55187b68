use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, Axis};
use serde_json::json;
use svimo::config::RunConfig;
use svimo::latent_codec;
use svimo::metrics::{self, EvalPair};
use svimo::synth_data::{
    self, background_image, decode_png, generate_dataset, make_splits, motion_bundle, motion_from_bundle,
    png_bytes, read_dataset, Dataset, Split,
};
use svimo::tensor_io::{self, write_atomic};
use svimo::trainer::{StepMetrics, Trainer};
use svimo::{Error, HandTrajectory, ObjectCloudSeq, Result, VideoTensor};

use crate::run::{file_hash, load_config, RunDir};
use crate::Common;

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

pub enum SampleSource {
    Single { image: PathBuf, prompt: String },
    Dataset { data: PathBuf, split: SplitChoice },
}

fn open_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = read_dataset(dir)?;
    let want = cfg.synth();
    if ds.manifest.config != want {
        return Err(Error::config(format!(
            "dataset at {} was generated with {:?}, configuration expects {:?}",
            dir.display(),
            ds.manifest.config,
            want
        )));
    }
    Ok(ds)
}

fn step_record(m: &StepMetrics, started: Instant) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(m)?;
    v["event"] = json!("step");
    v["elapsed_ms"] = json!(started.elapsed().as_millis() as u64);
    Ok(v)
}

/// Write a diagnostic next to the log before surfacing a failed step.
fn fail_step(run: &RunDir, step: usize, e: Error) -> Error {
    let dump = json!({ "step": step, "kind": e.kind(), "message": e.to_string() });
    let _ = write_atomic(&run.root.join("diagnostic.json"), dump.to_string().as_bytes());
    e
}

pub fn datagen(common: &Common, out: &Path) -> Result<()> {
    let (cfg, seed_source) = load_config(&common.config, &common.overrides)?;
    let synth = cfg.synth();
    let records = generate_dataset(cfg.seed, cfg.data.samples, &synth)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let (train, test) = make_splits(&ids, cfg.data.train_ratio, cfg.seed)?;
    let (n_train, n_test) = (train.len(), test.len());
    synth_data::write_dataset(&records, &synth, Split { train, test }, out)?;
    let hash = file_hash(&synth_data::manifest_path(out))?;
    let inputs = BTreeMap::new();
    let mut run = RunDir::create(out, "datagen", &cfg, seed_source, &inputs)?;
    run.log(json!({
        "event": "datagen",
        "samples": records.len(),
        "train": n_train,
        "test": n_test,
        "manifest_sha256": hash,
    }))
}

pub fn warmup(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let (cfg, seed_source) = load_config(&common.config, &common.overrides)?;
    let ds = open_dataset(&cfg, data)?;
    let inputs = BTreeMap::from([("dataset".to_string(), file_hash(&synth_data::manifest_path(data))?)]);
    let mut run = RunDir::create(out, "warmup", &cfg, seed_source, &inputs)?;
    let mut tr = Trainer::new(&cfg)?;
    let samples = tr.prepare(&ds.train())?;
    let ckpt = out.join("checkpoint");
    let started = Instant::now();
    for step in 1..=cfg.train.warmup_steps {
        let m = tr.warmup_step(&samples).map_err(|e| fail_step(&run, step, e))?;
        run.log(step_record(&m, started)?)?;
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            tr.save_checkpoint(&ckpt)?;
        }
    }
    tr.save_checkpoint(&ckpt)?;
    run.log(json!({ "event": "checkpoint", "path": ckpt, "warmup_steps": cfg.train.warmup_steps }))
}

pub fn train(common: &Common, data: &Path, vid_ckpt: &Path, out: &Path) -> Result<()> {
    let (cfg, seed_source) = load_config(&common.config, &common.overrides)?;
    let ds = open_dataset(&cfg, data)?;
    let inputs = BTreeMap::from([
        ("dataset".to_string(), file_hash(&synth_data::manifest_path(data))?),
        ("vid_checkpoint".to_string(), file_hash(&vid_ckpt.join("manifest.json"))?),
    ]);
    let mut tr = Trainer::load_checkpoint(vid_ckpt, Some(&cfg))?;
    let mut run = RunDir::create(out, "train", &cfg, seed_source, &inputs)?;
    let (warm, _) = tr.steps_done();
    if warm < cfg.train.warmup_steps as u64 {
        run.log(json!({
            "event": "warning",
            "message": format!("checkpoint has {warm} warm-up steps, configuration asks for {}", cfg.train.warmup_steps),
        }))?;
    }
    let samples = tr.prepare(&ds.train())?;
    let ckpt = out.join("checkpoint");
    let started = Instant::now();
    for step in 1..=cfg.train.total_steps {
        let m = if step == 1 {
            // Record the wiring of the first step: the probe sees the same batch.
            let (grad, probe) = tr.vid_gradient_to_svimo(&samples)?;
            let guidance_max = probe.guidance.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
            let mut trace = Vec::new();
            let m = tr.joint_step(&samples, Some(&mut trace)).map_err(|e| fail_step(&run, step, e))?;
            let doc = json!({
                "feedback_mode": cfg.train.feedback_mode,
                "vid_to_svimo_grad_norm": grad,
                "guidance_abs_max": guidance_max,
                "ops": trace,
            });
            write_atomic(&out.join("trace.json"), &serde_json::to_vec_pretty(&doc)?)?;
            m
        } else {
            tr.joint_step(&samples, None).map_err(|e| fail_step(&run, step, e))?
        };
        run.log(step_record(&m, started)?)?;
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            tr.save_checkpoint(&ckpt)?;
        }
    }
    tr.save_checkpoint(&ckpt)?;
    run.log(json!({ "event": "checkpoint", "path": ckpt, "joint_steps": cfg.train.total_steps }))
}

fn write_frames(dir: &Path, video: &VideoTensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in 0..video.len() {
        write_atomic(&dir.join(format!("{f:04}.png")), &png_bytes(&video.frame(f))?)?;
    }
    Ok(())
}

fn read_frames(dir: &Path, fps: f32) -> Result<VideoTensor> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("{:04}.png", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(decode_png(&std::fs::read(&p)?)?);
    }
    let first = frames.first().ok_or_else(|| Error::MissingArtifact(dir.join("0000.png")))?;
    let (h, w, _) = first.dim();
    let mut out = Array4::<f32>::zeros((frames.len(), h, w, 3));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, 3) {
            return Err(Error::integrity(dir, "frames differ in size"));
        }
        out.index_axis_mut(Axis(0), i).assign(f);
    }
    VideoTensor::new(out, fps)
}

pub fn sample(
    common: &Common,
    ckpt: &Path,
    source: SampleSource,
    steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let (cfg, seed_source) = load_config(&common.config, &common.overrides)?;
    let steps = steps.unwrap_or(cfg.schedule.sample_steps);
    let seed = seed.unwrap_or(cfg.seed);
    let mut inputs = BTreeMap::from([("checkpoint".to_string(), file_hash(&ckpt.join("manifest.json"))?)]);
    let jobs: Vec<(String, ndarray::Array3<f32>, String)> = match source {
        SampleSource::Single { image, prompt } => {
            let bytes = std::fs::read(&image).map_err(|_| Error::MissingArtifact(image.clone()))?;
            inputs.insert("image".into(), synth_data::sha256_hex(&bytes));
            vec![("sample".into(), decode_png(&bytes)?, prompt)]
        }
        SampleSource::Dataset { data, split } => {
            let ds = open_dataset(&cfg, &data)?;
            inputs.insert("dataset".into(), file_hash(&synth_data::manifest_path(&data))?);
            let recs = match split {
                SplitChoice::Train => ds.train(),
                SplitChoice::Test => ds.test(),
                SplitChoice::All => ds.records.iter().collect(),
            };
            recs.into_iter().map(|r| (r.id.clone(), r.image.clone(), r.prompt.clone())).collect()
        }
    };
    let tr = Trainer::load_checkpoint(ckpt, Some(&cfg))?;
    let mut run = RunDir::create(out, "sample", &cfg, seed_source, &inputs)?;
    let started = Instant::now();
    for (i, (id, image, prompt)) in jobs.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let g = tr.generate(image, prompt, steps, s)?;
        let dir = out.join(id);
        write_frames(&dir.join("frames"), &g.video)?;
        write_frames(&dir.join("motion_frames"), &g.motion_video)?;
        write_atomic(&dir.join("motion.svt"), &tensor_io::encode_bundle(&motion_bundle(&g.hands, &g.objects)?))?;
        let meta = json!({ "prompt": prompt, "steps": steps, "seed": s });
        write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
        run.log(json!({
            "event": "sample",
            "id": id,
            "seed": s,
            "steps": steps,
            "elapsed_ms": started.elapsed().as_millis() as u64,
        }))?;
    }
    Ok(())
}

struct Generated {
    id: String,
    video: VideoTensor,
    foreground: ndarray::Array3<bool>,
    hands: HandTrajectory,
    objects: ObjectCloudSeq,
}

pub fn eval(common: &Common, real: &Path, gen: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = load_config(&common.config, &common.overrides)?;
    let ds = open_dataset(&cfg, real)?;
    let background = background_image(cfg.shapes.height, cfg.shapes.width);
    let mut generated = Vec::new();
    for r in &ds.records {
        let dir = gen.join(&r.id);
        if !dir.exists() {
            continue;
        }
        let video = read_frames(&dir.join("frames"), cfg.data.fps)?;
        let motion_path = dir.join("motion.svt");
        if !motion_path.exists() {
            return Err(Error::MissingArtifact(motion_path));
        }
        let (hands, objects) = motion_from_bundle(&tensor_io::read_bundle(&motion_path)?, &motion_path)?;
        let foreground = metrics::masks_from_background(&video, &background, cfg.metrics.mask_threshold)?;
        generated.push(Generated { id: r.id.clone(), video, foreground, hands, objects });
    }
    if generated.is_empty() {
        return Err(Error::MissingArtifact(gen.to_path_buf()));
    }
    let pairs: Vec<EvalPair> = generated
        .iter()
        .map(|g| {
            let r = ds.records.iter().find(|r| r.id == g.id).expect("id taken from the dataset");
            EvalPair {
                id: g.id.clone(),
                video: &g.video,
                foreground: &g.foreground,
                hands: &g.hands,
                objects: &g.objects,
                ref_hands: &r.hands,
                ref_objects: &r.objects,
            }
        })
        .collect();
    let rows: Vec<Vec<f32>> = ds.records.iter().map(|r| metrics::flatten_motion(&r.hands, &r.objects)).collect();
    let encoder = metrics::train_motion_autoencoder(&rows, &cfg.metrics.autoencoder);
    let mut report = metrics::evaluate(&pairs, cfg.metrics.tau_op, encoder.as_ref().ok())?;
    if let Err(e) = &encoder {
        report.flags.push(format!("fid skipped: {e}"));
    }
    write_atomic(out, &serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

pub fn token_budget(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(&common.config, &common.overrides)?;
    let b = latent_codec::token_budget(&cfg.shapes)?;
    let [t, h, w] = cfg.shapes.latent_grid();
    println!("latent grid  [{t}, {h}, {w}]");
    println!("text         {}", b.text);
    println!("video        {}", b.video);
    println!("motion       {}", b.motion);
    println!("total        {}", b.total);
    Ok(())
}
