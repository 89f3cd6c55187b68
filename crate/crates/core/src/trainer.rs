//! VID warm-up, closed-loop joint training, generation and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{svimo_loss, Svimo, SvimoInputs};
use crate::config::{CodecKind, FeedbackMode, RunConfig};
use crate::error::{Error, Result};
use crate::latent_codec::{Codec, LatentVideo, LearnedCodec, VideoTensor};
use crate::motion::{array3_to_tensor, tensor_to_array3, HandTrajectory, ObjectCloudSeq, Skeleton};
use crate::nn::{Adam, AdamConfig, Builder, ParamStore};
use crate::projection::{default_camera, default_view, render_motion_video, CameraModel};
use crate::rng::{streams, RngState, RngStream};
use crate::scheduler::{NoiseSchedule, SubSchedule};
use crate::synth_data::{scene_bounds, synth_vocab, SampleRecord};
use crate::tensor_io::{self, HostTensor};
use crate::vid::{vid_loss, Vid, VidShape};
use crate::vocab::PromptVocab;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const SVIMO_PREFIX: &str = "svimo";
pub const VID_PREFIX: &str = "vid";

/// A training sample with its latents precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub z_video: LatentVideo,
    pub z_image: LatentVideo,
    pub z_motion: LatentVideo,
    pub hands: HandTrajectory,
    pub objects: ObjectCloudSeq,
    pub text_ids: Vec<u32>,
}

/// Batched tensors; latents are `[B, t, h, w, c]`, motion `[B, N, ·, 3]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub z_video: Tensor,
    pub z_image: Tensor,
    pub z_motion: Tensor,
    pub hands: Tensor,
    pub objects: Tensor,
    pub text_ids: Tensor,
}

fn stack(items: Vec<Tensor>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = items.iter().collect();
    Ok(Tensor::stack(&refs, 0)?)
}

impl Batch {
    pub fn from_samples(samples: &[&PreparedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let lat = |f: fn(&PreparedSample) -> &LatentVideo| -> Result<Tensor> {
            stack(samples.iter().map(|s| f(s).to_tensor(DType::F32)).collect::<Result<_>>()?)
        };
        let l = samples[0].text_ids.len();
        let ids: Vec<u32> = samples.iter().flat_map(|s| s.text_ids.iter().copied()).collect();
        Ok(Self {
            z_video: lat(|s| &s.z_video)?,
            z_image: lat(|s| &s.z_image)?,
            z_motion: lat(|s| &s.z_motion)?,
            hands: stack(
                samples
                    .iter()
                    .map(|s| array3_to_tensor(&s.hands.joints, DType::F32))
                    .collect::<Result<_>>()?,
            )?,
            objects: stack(
                samples
                    .iter()
                    .map(|s| array3_to_tensor(&s.objects.points, DType::F32))
                    .collect::<Result<_>>()?,
            )?,
            text_ids: Tensor::from_vec(ids, (samples.len(), l), &Device::Cpu)?,
        })
    }

    /// Multiply the three latent tensors by `s`.
    pub fn scaled(self, s: f64) -> Result<Self> {
        Ok(Self {
            z_video: self.z_video.affine(s, 0.0)?,
            z_image: self.z_image.affine(s, 0.0)?,
            z_motion: self.z_motion.affine(s, 0.0)?,
            ..self
        })
    }

    pub fn len(&self) -> usize {
        self.z_video.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One recorded sub-operation of a training step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub op: String,
    pub shapes: Vec<Vec<usize>>,
    pub note: String,
}

fn trace(t: &mut Option<&mut Vec<TraceEntry>>, op: &str, shapes: &[&Tensor], note: &str) {
    if let Some(t) = t.as_deref_mut() {
        t.push(TraceEntry {
            op: op.to_string(),
            shapes: shapes.iter().map(|s| s.dims().to_vec()).collect(),
            note: note.to_string(),
        });
    }
}

/// Op sequence of a joint step that uses guidance.
pub const JOINT_TRACE_WITH_GUIDANCE: [&str; 9] = [
    "sample_t",
    "diffuse",
    "vid_no_grad",
    "render",
    "encode_guidance",
    "svimo_forward",
    "vid_on_prediction",
    "loss",
    "optimizer_step",
];

/// Op sequence when guidance is replaced by zeros.
pub const JOINT_TRACE_ZERO_GUIDANCE: [&str; 7] = [
    "sample_t",
    "diffuse",
    "zero_guidance",
    "svimo_forward",
    "vid_on_prediction",
    "loss",
    "optimizer_step",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub phase: Phase,
    pub step: u64,
    pub timesteps: Vec<usize>,
    pub loss: f64,
    pub loss_svimo: Option<f64>,
    pub loss_vid: f64,
    pub grad_norm_svimo: Option<f64>,
    pub grad_norm_vid: f64,
    pub learning_rate: f64,
}

/// Random draws for one step, taken from the named streams in a fixed order.
#[derive(Debug, Clone)]
pub struct StepDraws {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub eps_video: Tensor,
    pub eps_motion: Tensor,
    pub eps_hands: Tensor,
    pub eps_objects: Tensor,
}

/// Everything a joint forward pass produces, kept for probes.
#[derive(Debug)]
pub struct JointForward {
    pub hands_tilde: Option<Tensor>,
    pub objects_tilde: Option<Tensor>,
    pub guidance: Tensor,
    pub zhat_video: Tensor,
    pub zhat_motion: Tensor,
    pub loss_svimo: Tensor,
    pub loss_vid: Tensor,
    pub total: Tensor,
}

/// Result of the reverse process.
#[derive(Debug, Clone)]
pub struct Generation {
    pub video: VideoTensor,
    pub hands: HandTrajectory,
    pub objects: ObjectCloudSeq,
    pub z_video: LatentVideo,
    pub z_motion: LatentVideo,
    pub motion_video: VideoTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchModel {
    pub codec: CodecKind,
    pub backbone: crate::backbone::BackboneConfig,
    pub vid: crate::vid::VidConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchData {
    pub joints: usize,
    pub points: usize,
}

/// Fields that fix parameter shapes, laid out like the run configuration;
/// checkpoints must agree on all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub shapes: crate::latent_codec::ShapeConfig,
    pub model: ArchModel,
    pub data: ArchData,
    pub vocab_size: usize,
}

impl Architecture {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            shapes: cfg.shapes,
            model: ArchModel {
                codec: cfg.model.codec,
                backbone: cfg.model.backbone,
                vid: cfg.model.vid,
            },
            data: ArchData {
                joints: cfg.data.joints,
                points: cfg.data.points,
            },
            vocab_size: synth_vocab().len(),
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// First dotted field where `self` (expected) and `found` differ.
    pub fn first_difference(&self, found: &Architecture) -> Option<(String, String, String)> {
        fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
            match v {
                serde_json::Value::Object(m) => {
                    for (k, v) in m {
                        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        flatten(&p, v, out);
                    }
                }
                other => {
                    out.insert(prefix.to_string(), other.to_string());
                }
            }
        }
        let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
        flatten("", &serde_json::to_value(self).ok()?, &mut a);
        flatten("", &serde_json::to_value(found).ok()?, &mut b);
        a.iter().find_map(|(k, va)| {
            let vb = b.get(k).cloned().unwrap_or_else(|| "absent".into());
            (va != &vb).then(|| (k.clone(), va.clone(), vb))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    architecture_hash: String,
    architecture: Architecture,
    config: RunConfig,
    warmup_steps_done: u64,
    joint_steps_done: u64,
    optimizer_steps: u64,
    codec_fitted: bool,
    rng: Vec<RngState>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub latent_mse: f64,
    pub mpjpe: f64,
    pub chamfer: f64,
}

pub fn latent_mse(a: &LatentVideo, b: &LatentVideo) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a.codes.iter().zip(b.codes.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(sum / a.codes.len() as f64)
}

pub struct Trainer {
    cfg: RunConfig,
    store: ParamStore,
    svimo: Svimo,
    vid: Vid,
    opt: Adam,
    schedule: NoiseSchedule,
    codec: Codec,
    codec_fitted: bool,
    vocab: PromptVocab,
    skeleton: Skeleton,
    camera: CameraModel,
    rng_data: RngStream,
    rng_t: RngStream,
    rng_noise: RngStream,
    warmup_done: u64,
    joint_done: u64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(name: &str, v: f64, step: u64, ts: &[usize]) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{name} is {v} at step {step} (timesteps {ts:?})")))
    }
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::of(cfg);
        let mut store = ParamStore::new(DType::F32);
        let mut init = RngStream::new(cfg.seed, streams::INIT);
        let vocab = synth_vocab();
        let c = cfg.shapes.latent_channels;
        let (svimo, vid) = {
            let mut b = Builder::new(&mut store, &mut init, SVIMO_PREFIX);
            let svimo = Svimo::new(&mut b, &cfg.model.backbone, &cfg.shapes, c, arch.vocab_size)?;
            let mut b = Builder::new(&mut store, &mut init, VID_PREFIX);
            let shape = VidShape {
                frames: cfg.shapes.frames,
                joints: cfg.data.joints,
                points: cfg.data.points,
                latent_grid: cfg.shapes.latent_grid(),
                latent_channels: c,
            };
            (svimo, Vid::new(&mut b, &cfg.model.vid, &shape)?)
        };
        let codec = match cfg.model.codec {
            CodecKind::Lossless => Codec::Lossless,
            CodecKind::Learned => Codec::Learned(LearnedCodec::new(&cfg.shapes, c, cfg.seed)?),
        };
        let schedule = NoiseSchedule::build(
            cfg.schedule.steps,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
            cfg.schedule.kind,
        )?;
        Ok(Self {
            cfg: *cfg,
            store,
            svimo,
            vid,
            opt: Adam::new(Self::adam_config(cfg)),
            schedule,
            codec_fitted: cfg.model.codec == CodecKind::Lossless,
            codec,
            vocab,
            skeleton: Skeleton::bimanual(cfg.data.joints)?,
            camera: default_camera(&scene_bounds(), cfg.shapes.width, cfg.shapes.height, default_view())?,
            rng_data: RngStream::new(cfg.seed, streams::DATA),
            rng_t: RngStream::new(cfg.seed, streams::DIFFUSION_T),
            rng_noise: RngStream::new(cfg.seed, streams::DIFFUSION_NOISE),
            warmup_done: 0,
            joint_done: 0,
        })
    }

    fn adam_config(cfg: &RunConfig) -> AdamConfig {
        AdamConfig {
            learning_rate: cfg.train.learning_rate,
            lr_warmup_steps: cfg.train.lr_warmup_steps,
            grad_clip: cfg.train.grad_clip,
            ..AdamConfig::default()
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn set_feedback_mode(&mut self, mode: FeedbackMode) {
        self.cfg.train.feedback_mode = mode;
    }

    pub fn set_loss_weights(&mut self, omega1: f64, omega2: f64) {
        self.cfg.train.omega1 = omega1;
        self.cfg.train.omega2 = omega2;
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.train.learning_rate = lr;
        self.opt.set_learning_rate(lr);
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn svimo(&self) -> &Svimo {
        &self.svimo
    }

    pub fn vid(&self) -> &Vid {
        &self.vid
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn vocab(&self) -> &PromptVocab {
        &self.vocab
    }

    pub fn steps_done(&self) -> (u64, u64) {
        (self.warmup_done, self.joint_done)
    }

    /// Rendered dot-and-skeleton video of a motion.
    pub fn render(&self, hands: &HandTrajectory, objects: &ObjectCloudSeq) -> Result<VideoTensor> {
        let mut v = render_motion_video(
            hands,
            objects,
            Some(&self.skeleton),
            &self.camera,
            self.cfg.shapes.height,
            self.cfg.shapes.width,
        )?;
        v.fps = self.cfg.data.fps;
        Ok(v)
    }

    /// Latent of the rendered motion video.
    pub fn motion_latent(&self, hands: &HandTrajectory, objects: &ObjectCloudSeq) -> Result<LatentVideo> {
        self.codec.encode(&self.render(hands, objects)?, &self.cfg.shapes)
    }

    /// Fit the learned codec if one is configured and not yet fitted.
    pub fn fit_codec(&mut self, records: &[&SampleRecord]) -> Result<()> {
        if self.codec_fitted {
            return Ok(());
        }
        let mut videos: Vec<VideoTensor> = records.iter().map(|r| r.video.clone()).collect();
        for r in records {
            videos.push(self.render(&r.hands, &r.objects)?);
        }
        let steps = self.cfg.model.codec_steps;
        let shapes = self.cfg.shapes;
        if let Codec::Learned(c) = &mut self.codec {
            c.train(&videos, &shapes, steps, 1e-2)?;
        }
        self.codec_fitted = true;
        Ok(())
    }

    pub fn prepare(&mut self, records: &[&SampleRecord]) -> Result<Vec<PreparedSample>> {
        self.fit_codec(records)?;
        let shapes = self.cfg.shapes;
        records
            .iter()
            .map(|r| {
                if r.hands.num_joints() != self.cfg.data.joints || r.objects.num_points() != self.cfg.data.points {
                    return Err(Error::shape(format!(
                        "sample {} has {} joints / {} points, config expects {} / {}",
                        r.id,
                        r.hands.num_joints(),
                        r.objects.num_points(),
                        self.cfg.data.joints,
                        self.cfg.data.points
                    )));
                }
                Ok(PreparedSample {
                    id: r.id.clone(),
                    z_video: self.codec.encode(&r.video, &shapes)?,
                    z_image: self.codec.encode_image(&r.image, &shapes)?,
                    z_motion: self.motion_latent(&r.hands, &r.objects)?,
                    hands: r.hands.clone(),
                    objects: r.objects.clone(),
                    text_ids: self.vocab.encode(&r.prompt, shapes.text_len)?,
                })
            })
            .collect()
    }

    fn noise_like(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Ok(Tensor::from_vec(rng.normal_vec(n), shape, &Device::Cpu)?)
    }

    /// Draw batch indices, timesteps and the four noise tensors.
    pub fn draw(&mut self, n_samples: usize, template: &PreparedSample) -> Result<StepDraws> {
        let (mut d, mut t, mut n) = (self.rng_data.clone(), self.rng_t.clone(), self.rng_noise.clone());
        let out = self.draw_with(&mut d, &mut t, &mut n, n_samples, template)?;
        (self.rng_data, self.rng_t, self.rng_noise) = (d, t, n);
        Ok(out)
    }

    fn draw_with(
        &self,
        rng_data: &mut RngStream,
        rng_t: &mut RngStream,
        rng_noise: &mut RngStream,
        n_samples: usize,
        template: &PreparedSample,
    ) -> Result<StepDraws> {
        let b = self.cfg.train.batch_size;
        let indices: Vec<usize> = (0..b).map(|_| rng_data.below(n_samples)).collect();
        let timesteps: Vec<usize> = (0..b).map(|_| rng_t.below(self.schedule.len())).collect();
        let lat = |l: &LatentVideo| {
            let (t, h, w, c) = l.dims();
            vec![b, t, h, w, c]
        };
        let j = template.hands.num_joints();
        let n = template.hands.frames();
        let k = template.objects.num_points();
        Ok(StepDraws {
            eps_video: Self::noise_like(rng_noise, &lat(&template.z_video))?,
            eps_motion: Self::noise_like(rng_noise, &lat(&template.z_motion))?,
            eps_hands: Self::noise_like(rng_noise, &[b, n, j, 3])?,
            eps_objects: Self::noise_like(rng_noise, &[b, n, k, 3])?,
            indices,
            timesteps,
        })
    }

    fn batch_of(&self, samples: &[PreparedSample], indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&PreparedSample> = indices.iter().map(|&i| &samples[i]).collect();
        Batch::from_samples(&picked)?.scaled(self.cfg.model.latent_scale)
    }

    fn check_timesteps(&self, ts: &[usize]) -> Result<()> {
        if let Some(&t) = ts.iter().find(|&&t| t >= self.schedule.len()) {
            return Err(Error::config(format!("timestep {t} outside [0, {})", self.schedule.len())));
        }
        Ok(())
    }

    /// VID prediction of clean motion; `ts` are table indices.
    pub fn vid_forward(
        &self,
        hands_t: &Tensor,
        objects_t: &Tensor,
        ts: &[usize],
        z_video: &Tensor,
        z_motion: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.check_timesteps(ts)?;
        self.vid.forward(hands_t, objects_t, ts, z_video, z_motion)
    }

    /// Render and encode each batch element of predicted motion.
    pub fn guidance_from(&self, hands: &Tensor, objects: &Tensor) -> Result<Tensor> {
        let b = hands.dim(0)?;
        let mut lats = Vec::with_capacity(b);
        for i in 0..b {
            let h = HandTrajectory::new(tensor_to_array3(&hands.get(i)?)?)?;
            let o = ObjectCloudSeq::new(tensor_to_array3(&objects.get(i)?)?)?;
            lats.push(self.motion_latent(&h, &o)?.to_tensor(DType::F32)?.affine(self.cfg.model.latent_scale, 0.0)?);
        }
        stack(lats)
    }

    pub fn warmup_step(&mut self, samples: &[PreparedSample]) -> Result<StepMetrics> {
        if samples.is_empty() {
            return Err(Error::shape("no training samples"));
        }
        let d = self.draw(samples.len(), &samples[0])?;
        let batch = self.batch_of(samples, &d.indices)?;
        let s = &self.schedule;
        let ts = &d.timesteps;
        let zt_v = s.forward_diffuse_batch(&batch.z_video, ts, &d.eps_video)?;
        let zt_m = s.forward_diffuse_batch(&batch.z_motion, ts, &d.eps_motion)?;
        let h_t = s.forward_diffuse_batch(&batch.hands, ts, &d.eps_hands)?;
        let o_t = s.forward_diffuse_batch(&batch.objects, ts, &d.eps_objects)?;
        let (h_hat, o_hat) = self.vid_forward(&h_t, &o_t, ts, &zt_v, &zt_m)?;
        let loss = vid_loss(&batch.hands, &h_hat, &batch.objects, &o_hat)?;
        let lv = scalar(&loss)?;
        let step = self.warmup_done + 1;
        check_finite("vid loss", lv, step, ts)?;
        let grads = loss.backward()?;
        let grad_norm_vid = self.store.grad_norm(&grads, VID_PREFIX)?;
        check_finite("vid gradient norm", grad_norm_vid, step, ts)?;
        self.opt.step(&self.store, &grads, |n| n.starts_with(VID_PREFIX))?;
        self.warmup_done = step;
        Ok(StepMetrics {
            phase: Phase::Warmup,
            step,
            timesteps: d.timesteps.clone(),
            loss: lv,
            loss_svimo: None,
            loss_vid: lv,
            grad_norm_svimo: None,
            grad_norm_vid,
            learning_rate: self.opt.current_lr(),
        })
    }

    /// The forward half of a joint step, following the training algorithm's line order.
    pub fn joint_forward(
        &self,
        samples: &[PreparedSample],
        d: &StepDraws,
        mut tr: Option<&mut Vec<TraceEntry>>,
    ) -> Result<JointForward> {
        let mode = self.cfg.train.feedback_mode;
        let batch = self.batch_of(samples, &d.indices)?;
        let ts = &d.timesteps;
        let ts_tensor = Tensor::from_vec(ts.iter().map(|&t| t as u32).collect::<Vec<_>>(), ts.len(), &Device::Cpu)?;
        trace(&mut tr, "sample_t", &[&ts_tensor], "");
        let s = &self.schedule;
        let zt_v = s.forward_diffuse_batch(&batch.z_video, ts, &d.eps_video)?;
        let zt_m = s.forward_diffuse_batch(&batch.z_motion, ts, &d.eps_motion)?;
        let h_t = s.forward_diffuse_batch(&batch.hands, ts, &d.eps_hands)?;
        let o_t = s.forward_diffuse_batch(&batch.objects, ts, &d.eps_objects)?;
        trace(&mut tr, "diffuse", &[&zt_v, &zt_m, &h_t, &o_t], "");

        let (hands_tilde, objects_tilde, guidance) = if mode.uses_guidance() {
            let (h, o) = self.vid_forward(&h_t, &o_t, ts, &zt_v, &zt_m)?;
            let (h, o) = (h.detach(), o.detach());
            trace(&mut tr, "vid_no_grad", &[&h, &o], "detached");
            trace(&mut tr, "render", &[&h, &o], "");
            let g = self.guidance_from(&h, &o)?;
            trace(&mut tr, "encode_guidance", &[&g], "");
            (Some(h), Some(o), g)
        } else {
            let g = zt_m.zeros_like()?;
            trace(&mut tr, "zero_guidance", &[&g], "");
            (None, None, g)
        };

        let (zhat_v, zhat_m) = self.svimo.forward(&SvimoInputs {
            z_video: &zt_v,
            z_image: &batch.z_image,
            z_motion: &zt_m,
            guidance: &guidance,
            text_ids: &batch.text_ids,
            timesteps: ts,
        })?;
        trace(&mut tr, "svimo_forward", &[&zhat_v, &zhat_m], "");

        let (vid_v, vid_m, note) = if mode.uses_gradient() {
            (zhat_v.clone(), zhat_m.clone(), "attached")
        } else {
            (zhat_v.detach(), zhat_m.detach(), "detached")
        };
        let (h_hat, o_hat) = self.vid_forward(&h_t, &o_t, ts, &vid_v, &vid_m)?;
        trace(&mut tr, "vid_on_prediction", &[&h_hat, &o_hat], note);

        let loss_svimo = svimo_loss(&zhat_v, &zhat_m, &batch.z_video, &batch.z_motion)?;
        let loss_vid = vid_loss(&batch.hands, &h_hat, &batch.objects, &o_hat)?;
        let total = ((loss_svimo.to_dtype(DType::F64)? * self.cfg.train.omega1)?
            + (loss_vid.to_dtype(DType::F64)? * self.cfg.train.omega2)?)?;
        trace(&mut tr, "loss", &[&total], "");
        Ok(JointForward {
            hands_tilde,
            objects_tilde,
            guidance,
            zhat_video: zhat_v,
            zhat_motion: zhat_m,
            loss_svimo,
            loss_vid,
            total,
        })
    }

    pub fn joint_step(&mut self, samples: &[PreparedSample], mut tr: Option<&mut Vec<TraceEntry>>) -> Result<StepMetrics> {
        if samples.is_empty() {
            return Err(Error::shape("no training samples"));
        }
        let d = self.draw(samples.len(), &samples[0])?;
        let f = self.joint_forward(samples, &d, tr.as_deref_mut())?;
        let step = self.joint_done + 1;
        let (ls, lv, lt) = (scalar(&f.loss_svimo)?, scalar(&f.loss_vid)?, scalar(&f.total)?);
        check_finite("svimo loss", ls, step, &d.timesteps)?;
        check_finite("vid loss", lv, step, &d.timesteps)?;
        check_finite("total loss", lt, step, &d.timesteps)?;
        let grads = f.total.backward()?;
        let gs = self.store.grad_norm(&grads, SVIMO_PREFIX)?;
        let gv = self.store.grad_norm(&grads, VID_PREFIX)?;
        check_finite("gradient norm", gs + gv, step, &d.timesteps)?;
        if self.joint_done == 0 {
            // Warm-up moments are scaled to the unweighted VID loss; under ω2 they
            // would shrink the head's steps for thousands of iterations.
            self.opt = Adam::new(Self::adam_config(&self.cfg));
        }
        self.opt.step(&self.store, &grads, |_| true)?;
        trace(&mut tr, "optimizer_step", &[], "svimo+vid");
        self.joint_done = step;
        Ok(StepMetrics {
            phase: Phase::Joint,
            step,
            timesteps: d.timesteps.clone(),
            loss: lt,
            loss_svimo: Some(ls),
            loss_vid: lv,
            grad_norm_svimo: Some(gs),
            grad_norm_vid: gv,
            learning_rate: self.opt.current_lr(),
        })
    }

    /// Norm of the VID loss gradient with respect to the denoiser parameters,
    /// for the batch the next step would draw. Training state is untouched.
    pub fn vid_gradient_to_svimo(&self, samples: &[PreparedSample]) -> Result<(f64, JointForward)> {
        if samples.is_empty() {
            return Err(Error::shape("no training samples"));
        }
        let (mut rd, mut rt, mut rn) = (self.rng_data.clone(), self.rng_t.clone(), self.rng_noise.clone());
        let d = self.draw_with(&mut rd, &mut rt, &mut rn, samples.len(), &samples[0])?;
        let f = self.joint_forward(samples, &d, None)?;
        let grads = f.loss_vid.backward()?;
        Ok((self.store.grad_norm(&grads, SVIMO_PREFIX)?, f))
    }

    /// Reverse process from pure noise over `steps` strided timesteps.
    pub fn generate(&self, image: &Array3<f32>, prompt: &str, steps: usize, seed: u64) -> Result<Generation> {
        let sub = SubSchedule::new(&self.schedule, steps)?;
        let shapes = self.cfg.shapes;
        let (ih, iw, _) = image.dim();
        if ih != shapes.height || iw != shapes.width {
            return Err(Error::shape(format!(
                "reference image is {ih}×{iw}, config expects {}×{}",
                shapes.height, shapes.width
            )));
        }
        let mut rng = RngStream::new(seed, streams::SAMPLING_NOISE);
        let scale = self.cfg.model.latent_scale;
        let z_i = self.codec.encode_image(image, &shapes)?.to_tensor(DType::F32)?.affine(scale, 0.0)?.unsqueeze(0)?;
        let ids = self.vocab.encode(prompt, shapes.text_len)?;
        let text = Tensor::from_vec(ids, (1, shapes.text_len), &Device::Cpu)?;
        let [t, h, w] = shapes.latent_grid();
        let lat_shape = [1, t, h, w, shapes.latent_channels];
        let (n, j, k) = (shapes.frames, self.cfg.data.joints, self.cfg.data.points);
        let mut z_v = Self::noise_like(&mut rng, &lat_shape)?;
        let mut z_m = Self::noise_like(&mut rng, &lat_shape)?;
        let mut h_t = Self::noise_like(&mut rng, &[1, n, j, 3])?;
        let mut o_t = Self::noise_like(&mut rng, &[1, n, k, 3])?;
        let mode = self.cfg.train.feedback_mode;
        for i in (0..sub.len()).rev() {
            let ts = [sub.step_indices()[i]];
            let guidance = if mode.uses_guidance() {
                let (ht, ot) = self.vid_forward(&h_t, &o_t, &ts, &z_v, &z_m)?;
                self.guidance_from(&ht.detach(), &ot.detach())?
            } else {
                z_m.zeros_like()?
            };
            let (zhat_v, zhat_m) = self.svimo.forward(&SvimoInputs {
                z_video: &z_v,
                z_image: &z_i,
                z_motion: &z_m,
                guidance: &guidance,
                text_ids: &text,
                timesteps: &ts,
            })?;
            let (zhat_v, zhat_m) = (zhat_v.detach(), zhat_m.detach());
            let (h_hat, o_hat) = self.vid_forward(&h_t, &o_t, &ts, &zhat_v, &zhat_m)?;
            let coeff = sub.step_coefficients(i)?;
            let nv = Self::noise_like(&mut rng, &lat_shape)?;
            let nm = Self::noise_like(&mut rng, &lat_shape)?;
            let nh = Self::noise_like(&mut rng, &[1, n, j, 3])?;
            let no = Self::noise_like(&mut rng, &[1, n, k, 3])?;
            z_v = coeff.apply(&z_v, &zhat_v, &nv)?.detach();
            z_m = coeff.apply(&z_m, &zhat_m, &nm)?.detach();
            h_t = coeff.apply(&h_t, &h_hat.detach(), &nh)?.detach();
            o_t = coeff.apply(&o_t, &o_hat.detach(), &no)?.detach();
        }
        let z_video = LatentVideo::from_tensor(&z_v.squeeze(0)?.affine(1.0 / scale, 0.0)?)?;
        let z_motion = LatentVideo::from_tensor(&z_m.squeeze(0)?.affine(1.0 / scale, 0.0)?)?;
        if !z_video.is_finite() || !z_motion.is_finite() {
            return Err(Error::Numerical("generation produced non-finite latents".into()));
        }
        let mut video = self.codec.decode(&z_video, &shapes)?;
        video.fps = self.cfg.data.fps;
        let hands = HandTrajectory::new(tensor_to_array3(&h_t.squeeze(0)?)?)?;
        let objects = ObjectCloudSeq::new(tensor_to_array3(&o_t.squeeze(0)?)?)?;
        let motion_video = self.render(&hands, &objects)?;
        Ok(Generation {
            video,
            hands,
            objects,
            z_video,
            z_motion,
            motion_video,
        })
    }

    /// Single-step clean prediction for a training sample at timestep `t`,
    /// using the same closed loop as a training step.
    pub fn reconstruct(&self, sample: &PreparedSample, t: usize, seed: u64) -> Result<(LatentVideo, HandTrajectory, ObjectCloudSeq)> {
        self.check_timesteps(&[t])?;
        let mut rng = RngStream::new(seed, "reconstruct");
        let one = Batch::from_samples(&[sample])?.scaled(self.cfg.model.latent_scale)?;
        let noise = |rng: &mut RngStream, x: &Tensor| Self::noise_like(rng, x.dims());
        let s = &self.schedule;
        let ts = [t];
        let zt_v = s.forward_diffuse_batch(&one.z_video, &ts, &noise(&mut rng, &one.z_video)?)?;
        let zt_m = s.forward_diffuse_batch(&one.z_motion, &ts, &noise(&mut rng, &one.z_motion)?)?;
        let h_t = s.forward_diffuse_batch(&one.hands, &ts, &noise(&mut rng, &one.hands)?)?;
        let o_t = s.forward_diffuse_batch(&one.objects, &ts, &noise(&mut rng, &one.objects)?)?;
        let guidance = if self.cfg.train.feedback_mode.uses_guidance() {
            let (h, o) = self.vid_forward(&h_t, &o_t, &ts, &zt_v, &zt_m)?;
            self.guidance_from(&h.detach(), &o.detach())?
        } else {
            zt_m.zeros_like()?
        };
        let (zhat_v, zhat_m) = self.svimo.forward(&SvimoInputs {
            z_video: &zt_v,
            z_image: &one.z_image,
            z_motion: &zt_m,
            guidance: &guidance,
            text_ids: &one.text_ids,
            timesteps: &ts,
        })?;
        let (h_hat, o_hat) = self.vid_forward(&h_t, &o_t, &ts, &zhat_v, &zhat_m)?;
        Ok((
            LatentVideo::from_tensor(&zhat_v.squeeze(0)?.detach().affine(1.0 / self.cfg.model.latent_scale, 0.0)?)?,
            HandTrajectory::new(tensor_to_array3(&h_hat.squeeze(0)?)?)?,
            ObjectCloudSeq::new(tensor_to_array3(&o_hat.squeeze(0)?)?)?,
        ))
    }

    /// Single-step fit on training samples, averaged over samples and `timesteps`.
    pub fn training_fit(&self, samples: &[PreparedSample], timesteps: &[usize], seed: u64) -> Result<FitReport> {
        if samples.is_empty() || timesteps.is_empty() {
            return Err(Error::shape("training fit needs samples and timesteps"));
        }
        let mut r = FitReport::default();
        for (i, s) in samples.iter().enumerate() {
            for (k, &t) in timesteps.iter().enumerate() {
                let (z, h, o) = self.reconstruct(s, t, seed.wrapping_add((i * timesteps.len() + k) as u64))?;
                r.latent_mse += latent_mse(&z, &s.z_video)?;
                r.mpjpe += crate::metrics::mpjpe(&s.hands, &h)?;
                r.chamfer += crate::metrics::object_chamfer(&s.objects, &o)?;
            }
        }
        let n = (samples.len() * timesteps.len()) as f64;
        r.latent_mse /= n;
        r.mpjpe /= n;
        r.chamfer /= n;
        Ok(r)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let arch = Architecture::of(&self.cfg);
        let (opt_steps, opt_state) = self.opt.to_host()?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT,
            architecture_hash: arch.hash(),
            architecture: arch,
            config: self.cfg,
            warmup_steps_done: self.warmup_done,
            joint_steps_done: self.joint_done,
            optimizer_steps: opt_steps,
            codec_fitted: self.codec_fitted,
            rng: vec![self.rng_data.state(), self.rng_t.state(), self.rng_noise.state()],
        };
        tensor_io::write_bundle(&dir.join("weights.svt"), &self.store.to_host()?)?;
        tensor_io::write_bundle(&dir.join("optimizer.svt"), &opt_state)?;
        if let Codec::Learned(c) = &self.codec {
            tensor_io::write_bundle(&dir.join("codec.svt"), &c.to_host()?)?;
        }
        tensor_io::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restore a checkpoint. With `cfg`, its architecture must match the
    /// checkpoint's; without, the stored configuration is used.
    pub fn load_checkpoint(dir: &Path, cfg: Option<&RunConfig>) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let bytes = std::fs::read(&mpath).map_err(|_| Error::MissingArtifact(mpath.clone()))?;
        let m: CheckpointManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&mpath, e.to_string()))?;
        if m.format_version != CHECKPOINT_FORMAT {
            return Err(Error::integrity(&mpath, format!("unsupported checkpoint format {}", m.format_version)));
        }
        if m.architecture.hash() != m.architecture_hash {
            return Err(Error::integrity(&mpath, "architecture hash does not match its description"));
        }
        let cfg = cfg.copied().unwrap_or(m.config);
        let want = Architecture::of(&cfg);
        if let Some((field, expected, found)) = want.first_difference(&m.architecture) {
            return Err(Error::ArchitectureMismatch { field, expected, found });
        }
        let mut tr = Self::new(&cfg)?;
        let read = |name: &str| -> Result<BTreeMap<String, HostTensor>> {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            tensor_io::read_bundle(&p)
        };
        let weights = read("weights.svt")?;
        if weights.len() != tr.store.iter().count() {
            return Err(Error::integrity(dir.join("weights.svt"), "parameter count differs from the model"));
        }
        tr.store.load_host(&weights)?;
        tr.opt = Adam::from_host(Self::adam_config(&cfg), m.optimizer_steps, &read("optimizer.svt")?)?;
        if let Codec::Learned(c) = &tr.codec {
            if m.codec_fitted {
                c.load_host(&read("codec.svt")?)?;
            }
        }
        tr.codec_fitted = m.codec_fitted;
        let find = |name: &str| -> Result<RngStream> {
            let st = m
                .rng
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::integrity(&mpath, format!("missing rng stream {name}")))?;
            RngStream::from_state(st)
        };
        tr.rng_data = find(streams::DATA)?;
        tr.rng_t = find(streams::DIFFUSION_T)?;
        tr.rng_noise = find(streams::DIFFUSION_NOISE)?;
        tr.warmup_done = m.warmup_steps_done;
        tr.joint_done = m.joint_steps_done;
        Ok(tr)
    }
}
