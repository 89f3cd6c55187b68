//! Video ⇄ latent mapping and token accounting.
//!
//! The default codec is a lossless space-to-depth / time-to-depth
//! rearrangement. Frame 0 sits alone in the first temporal group, whose
//! remaining `rn − 1` slots are zero; later groups hold `rn` consecutive
//! frames. Channel order inside a latent cell is `(dt, dy, dx, rgb)`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Builder, Init, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tensor_io::HostTensor;

/// Raw frames `[N, H, W, 3]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub frames: Array4<f32>,
    pub fps: f32,
}

impl VideoTensor {
    pub fn new(frames: Array4<f32>, fps: f32) -> Result<Self> {
        if frames.dim().3 != 3 {
            return Err(Error::shape(format!("video needs 3 channels, got {}", frames.dim().3)));
        }
        Ok(Self { frames, fps })
    }

    pub fn zeros(n: usize, h: usize, w: usize, fps: f32) -> Self {
        Self {
            frames: Array4::zeros((n, h, w, 3)),
            fps,
        }
    }

    pub fn from_image(image: &Array3<f32>, fps: f32) -> Self {
        Self {
            frames: image.clone().insert_axis(Axis(0)),
            fps,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frame(&self, n: usize) -> Array3<f32> {
        self.frames.index_axis(Axis(0), n).to_owned()
    }

    pub fn clamp(&mut self) {
        self.frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

/// Latent grid `[(N − 1)/rn + 1, H/rh, W/rw, d_latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub codes: Array4<f32>,
}

impl LatentVideo {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.codes.dim()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (t, h, w, c) = self.dims();
        let data: Vec<f32> = self.codes.iter().copied().collect();
        Ok(Tensor::from_vec(data, (t, h, w, c), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (a, b, c, d) = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self {
            codes: Array4::from_shape_vec((a, b, c, d), data).map_err(|e| Error::shape(e.to_string()))?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.codes.iter().all(|v| v.is_finite())
    }
}

/// Stack per-sample latents into a `[B, T, h, w, c]` tensor.
pub fn stack_latents(items: &[&LatentVideo], dtype: DType) -> Result<Tensor> {
    let ts = items.iter().map(|l| l.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Split a `[B, T, h, w, c]` tensor into per-sample latents.
pub fn unstack_latents(t: &Tensor) -> Result<Vec<LatentVideo>> {
    (0..t.dim(0)?).map(|b| LatentVideo::from_tensor(&t.get(b)?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Compression ratios `[rh, rw, rn]`.
    pub ratios: [usize; 3],
    pub patch: usize,
    pub text_len: usize,
    /// Channels per latent cell; lossless mode requires `rh·rw·rn·3`.
    pub latent_channels: usize,
}

impl ShapeConfig {
    pub fn rh(&self) -> usize {
        self.ratios[0]
    }

    pub fn rw(&self) -> usize {
        self.ratios[1]
    }

    pub fn rn(&self) -> usize {
        self.ratios[2]
    }

    pub fn lossless_channels(&self) -> usize {
        self.rh() * self.rw() * self.rn() * 3
    }

    /// Desk-scale defaults used throughout the tests.
    pub fn desk() -> Self {
        Self {
            frames: 9,
            height: 32,
            width: 48,
            ratios: [4, 4, 2],
            patch: 2,
            text_len: 12,
            latent_channels: 96,
        }
    }

    /// Full-resolution shapes, only ever used for accounting.
    pub fn full() -> Self {
        Self {
            frames: 49,
            height: 416,
            width: 624,
            ratios: [8, 8, 4],
            patch: 2,
            text_len: 226,
            latent_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [rh, rw, rn] = self.ratios;
        if rh == 0 || rw == 0 || rn == 0 || self.patch == 0 {
            return Err(Error::config("ratios and patch size must be positive"));
        }
        if self.frames == 0 || (self.frames - 1) % rn != 0 {
            return Err(Error::config(format!(
                "frame count {} must be ≡ 1 (mod {rn})",
                self.frames
            )));
        }
        if self.height % (rh * self.patch) != 0 {
            return Err(Error::config(format!(
                "height {} not divisible by rh·patch = {}",
                self.height,
                rh * self.patch
            )));
        }
        if self.width % (rw * self.patch) != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by rw·patch = {}",
                self.width,
                rw * self.patch
            )));
        }
        if self.latent_channels == 0 {
            return Err(Error::config("latent_channels must be positive"));
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        (self.frames - 1) / self.rn() + 1
    }

    /// `[T_lat, H/rh, W/rw]`.
    pub fn latent_grid(&self) -> [usize; 3] {
        [self.latent_frames(), self.height / self.rh(), self.width / self.rw()]
    }

    /// `[T_lat, H/(rh·p), W/(rw·p)]`.
    pub fn token_grid(&self) -> [usize; 3] {
        let [t, h, w] = self.latent_grid();
        [t, h / self.patch, w / self.patch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenBudget {
    pub text: usize,
    pub video: usize,
    pub motion: usize,
    pub total: usize,
}

pub fn token_budget(cfg: &ShapeConfig) -> Result<TokenBudget> {
    cfg.validate()?;
    let [t, h, w] = cfg.token_grid();
    let video = t * h * w;
    Ok(TokenBudget {
        text: cfg.text_len,
        video,
        motion: video,
        total: cfg.text_len + 2 * video,
    })
}

fn check_video(video: &VideoTensor, cfg: &ShapeConfig) -> Result<()> {
    let (n, h, w, _) = video.frames.dim();
    let [rh, rw, rn] = cfg.ratios;
    if n == 0 || (n - 1) % rn != 0 {
        return Err(Error::shape(format!("{n} frames is not ≡ 1 (mod {rn})")));
    }
    if h % rh != 0 || w % rw != 0 {
        return Err(Error::shape(format!("{h}×{w} frames not divisible by {rh}×{rw}")));
    }
    Ok(())
}

/// Lossless space/time-to-depth rearrangement.
pub fn encode_lossless(video: &VideoTensor, cfg: &ShapeConfig) -> Result<LatentVideo> {
    check_video(video, cfg)?;
    let (n, h, w, _) = video.frames.dim();
    let [rh, rw, rn] = cfg.ratios;
    let groups = (n - 1) / rn + 1;
    let c = rh * rw * rn * 3;
    let mut codes = Array4::<f32>::zeros((groups, h / rh, w / rw, c));
    for g in 0..groups {
        for dt in 0..rn {
            let Some(f) = group_frame(g, dt, rn) else { continue };
            for y in 0..h {
                for x in 0..w {
                    let ch = ((dt * rh + y % rh) * rw + x % rw) * 3;
                    for k in 0..3 {
                        codes[[g, y / rh, x / rw, ch + k]] = video.frames[[f, y, x, k]];
                    }
                }
            }
        }
    }
    Ok(LatentVideo { codes })
}

/// Inverse of [`encode_lossless`]; padded slots of the first group are dropped.
pub fn decode_lossless(lat: &LatentVideo, cfg: &ShapeConfig, clamp: bool) -> Result<VideoTensor> {
    let (groups, gh, gw, c) = lat.dims();
    let [rh, rw, rn] = cfg.ratios;
    if c != rh * rw * rn * 3 {
        return Err(Error::shape(format!("latent has {c} channels, lossless needs {}", rh * rw * rn * 3)));
    }
    if groups == 0 {
        return Err(Error::shape("latent has no temporal slots"));
    }
    let n = (groups - 1) * rn + 1;
    let (h, w) = (gh * rh, gw * rw);
    let mut frames = Array4::<f32>::zeros((n, h, w, 3));
    for g in 0..groups {
        for dt in 0..rn {
            let Some(f) = group_frame(g, dt, rn) else { continue };
            for y in 0..h {
                for x in 0..w {
                    let ch = ((dt * rh + y % rh) * rw + x % rw) * 3;
                    for k in 0..3 {
                        let v = lat.codes[[g, y / rh, x / rw, ch + k]];
                        frames[[f, y, x, k]] = if clamp { v.clamp(0.0, 1.0) } else { v };
                    }
                }
            }
        }
    }
    Ok(VideoTensor { frames, fps: 0.0 })
}

fn group_frame(g: usize, dt: usize, rn: usize) -> Option<usize> {
    match (g, dt) {
        (0, 0) => Some(0),
        (0, _) => None,
        _ => Some(1 + (g - 1) * rn + dt),
    }
}

/// Per-cell learned autoencoder: a strided 3D convolution whose kernel equals
/// the compression block, followed by its transposed counterpart.
#[derive(Debug)]
pub struct LearnedCodec {
    store: ParamStore,
    encoder: Linear,
    decoder: Linear,
    channels: usize,
}

impl LearnedCodec {
    pub fn new(cfg: &ShapeConfig, channels: usize, seed: u64) -> Result<Self> {
        let block = cfg.lossless_channels();
        let mut store = ParamStore::new(DType::F32);
        let mut rng = RngStream::new(seed, "codec-init");
        let mut b = Builder::new(&mut store, &mut rng, "codec");
        let encoder = Linear::with_init(&mut b.sub("encoder"), block, channels, Init::FanIn(block), Some(Init::Zeros))?;
        let decoder = Linear::with_init(&mut b.sub("decoder"), channels, block, Init::FanIn(channels), Some(Init::Zeros))?;
        Ok(Self {
            store,
            encoder,
            decoder,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn blocks(&self, video: &VideoTensor, cfg: &ShapeConfig) -> Result<Tensor> {
        encode_lossless(video, cfg)?.to_tensor(DType::F32)
    }

    pub fn encode(&self, video: &VideoTensor, cfg: &ShapeConfig) -> Result<LatentVideo> {
        LatentVideo::from_tensor(&self.encoder.forward(&self.blocks(video, cfg)?)?)
    }

    pub fn decode(&self, lat: &LatentVideo, cfg: &ShapeConfig, clamp: bool) -> Result<VideoTensor> {
        if lat.dims().3 != self.channels {
            return Err(Error::shape(format!("latent has {} channels, codec uses {}", lat.dims().3, self.channels)));
        }
        let blocks = LatentVideo::from_tensor(&self.decoder.forward(&lat.to_tensor(DType::F32)?)?)?;
        decode_lossless(&blocks, cfg, clamp)
    }

    /// Fit on a set of videos by minimizing reconstruction MSE. Returns the final MSE.
    pub fn train(&mut self, videos: &[VideoTensor], cfg: &ShapeConfig, steps: usize, lr: f64) -> Result<f64> {
        let blocks: Vec<Tensor> = videos.iter().map(|v| self.blocks(v, cfg)).collect::<Result<_>>()?;
        let data = Tensor::stack(&blocks, 0)?;
        let mut opt = Adam::new(AdamConfig {
            learning_rate: lr,
            lr_warmup_steps: 0,
            ..AdamConfig::default()
        });
        let mut last = f64::INFINITY;
        for _ in 0..steps {
            let recon = self.decoder.forward(&self.encoder.forward(&data)?)?;
            let loss = (recon - &data)?.sqr()?.mean_all()?;
            last = loss.to_scalar::<f32>()? as f64;
            if !last.is_finite() {
                return Err(Error::Numerical("codec reconstruction loss is not finite".into()));
            }
            let grads = loss.backward()?;
            opt.step(&self.store, &grads, |_| true)?;
        }
        Ok(last)
    }

    pub fn to_host(&self) -> Result<BTreeMap<String, HostTensor>> {
        self.store.to_host()
    }

    pub fn load_host(&self, host: &BTreeMap<String, HostTensor>) -> Result<()> {
        self.store.load_host(host)
    }
}

/// The codec used for both the video and the rendered motion stream.
#[derive(Debug)]
pub enum Codec {
    Lossless,
    Learned(LearnedCodec),
}

impl Codec {
    pub fn encode(&self, video: &VideoTensor, cfg: &ShapeConfig) -> Result<LatentVideo> {
        match self {
            Codec::Lossless => encode_lossless(video, cfg),
            Codec::Learned(c) => c.encode(video, cfg),
        }
    }

    /// Decode and clamp to `[0, 1]`.
    pub fn decode(&self, lat: &LatentVideo, cfg: &ShapeConfig) -> Result<VideoTensor> {
        match self {
            Codec::Lossless => decode_lossless(lat, cfg, true),
            Codec::Learned(c) => c.decode(lat, cfg, true),
        }
    }

    /// Encode a single reference image as a one-slot latent.
    pub fn encode_image(&self, image: &Array3<f32>, cfg: &ShapeConfig) -> Result<LatentVideo> {
        self.encode(&VideoTensor::from_image(image, 0.0), cfg)
    }

    pub fn channels(&self, cfg: &ShapeConfig) -> usize {
        match self {
            Codec::Lossless => cfg.lossless_channels(),
            Codec::Learned(c) => c.channels(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;
    use proptest::prelude::*;

    fn random_video(n: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = RngStream::new(seed, streams::DATA);
        let data: Vec<f32> = (0..n * h * w * 3).map(|_| rng.uniform() as f32).collect();
        VideoTensor::new(Array4::from_shape_vec((n, h, w, 3), data).unwrap(), 8.0).unwrap()
    }

    #[test]
    fn full_latent_grid_and_tokens() {
        let cfg = ShapeConfig::full();
        assert_eq!(cfg.latent_grid(), [13, 52, 78]);
        let b = token_budget(&cfg).unwrap();
        assert_eq!((b.video, b.motion, b.text, b.total), (13182, 13182, 226, 26590));
    }

    #[test]
    fn minimal_grid_budget() {
        let cfg = ShapeConfig {
            frames: 1,
            height: 8,
            width: 8,
            ratios: [4, 4, 2],
            patch: 2,
            text_len: 0,
            latent_channels: 96,
        };
        assert_eq!(token_budget(&cfg).unwrap().total, 2);
    }

    #[test]
    fn desk_budget() {
        assert_eq!(token_budget(&ShapeConfig::desk()).unwrap().video, 120);
    }

    #[test]
    fn budget_rejects_indivisible() {
        let mut cfg = ShapeConfig::desk();
        cfg.width = 50;
        assert!(token_budget(&cfg).is_err());
        cfg = ShapeConfig::desk();
        cfg.frames = 10;
        assert!(token_budget(&cfg).is_err());
    }

    #[test]
    fn lossless_round_trip_and_shape() {
        let cfg = ShapeConfig::desk();
        let v = random_video(9, 32, 48, 3);
        let lat = encode_lossless(&v, &cfg).unwrap();
        assert_eq!(lat.dims(), (5, 8, 12, 96));
        let back = decode_lossless(&lat, &cfg, true).unwrap();
        assert_eq!(back.frames, v.frames);
    }

    #[test]
    fn first_group_is_zero_padded() {
        let cfg = ShapeConfig::desk();
        let mut v = VideoTensor::zeros(9, 32, 48, 8.0);
        v.frames.fill(1.0);
        let lat = encode_lossless(&v, &cfg).unwrap();
        let half = 48;
        for ch in 0..96 {
            let want = if ch < half { 1.0 } else { 0.0 };
            assert_eq!(lat.codes[[0, 3, 5, ch]], want);
            assert_eq!(lat.codes[[2, 3, 5, ch]], 1.0);
        }
    }

    #[test]
    fn constant_video_gives_constant_blocks() {
        let cfg = ShapeConfig::desk();
        let mut v = VideoTensor::zeros(9, 32, 48, 8.0);
        v.frames.fill(0.3);
        let lat = encode_lossless(&v, &cfg).unwrap();
        assert!(lat.codes.slice(ndarray::s![1.., .., .., ..]).iter().all(|&x| x == 0.3));
    }

    #[test]
    fn zero_latent_decodes_to_zero_video() {
        let cfg = ShapeConfig::desk();
        let lat = LatentVideo {
            codes: Array4::zeros((5, 8, 12, 96)),
        };
        assert!(decode_lossless(&lat, &cfg, true).unwrap().frames.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_latent_round_trips_through_decode() {
        let cfg = ShapeConfig::desk();
        let mut rng = RngStream::new(5, streams::DATA);
        let mut lat = LatentVideo {
            codes: Array4::from_shape_fn((5, 8, 12, 96), |_| rng.normal() as f32),
        };
        lat.codes.slice_mut(ndarray::s![0, .., .., 48..]).fill(0.0);
        let back = encode_lossless(&decode_lossless(&lat, &cfg, false).unwrap(), &cfg).unwrap();
        let err = (&back.codes - &lat.codes).iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!(err < 1e-7);
    }

    #[test]
    fn encode_rejects_bad_frame_count() {
        let cfg = ShapeConfig::desk();
        let v = random_video(8, 32, 48, 1);
        assert!(matches!(encode_lossless(&v, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn learned_codec_reaches_reconstruction_target() {
        let cfg = ShapeConfig {
            frames: 3,
            height: 8,
            width: 8,
            ratios: [2, 2, 2],
            patch: 2,
            text_len: 0,
            latent_channels: 12,
        };
        // Piecewise-smooth videos: horizontal gradients with a per-video tint.
        let videos: Vec<VideoTensor> = (0..4)
            .map(|k| {
                let f = Array4::from_shape_fn((3, 8, 8, 3), |(n, _, x, c)| {
                    (0.1 + 0.08 * x as f32 + 0.05 * k as f32 + 0.02 * (n + c) as f32).min(1.0)
                });
                VideoTensor::new(f, 8.0).unwrap()
            })
            .collect();
        let mut codec = LearnedCodec::new(&cfg, 12, 0).unwrap();
        let mse = codec.train(&videos, &cfg, 800, 1e-2).unwrap();
        assert!(mse < 1e-3, "reconstruction mse {mse}");
        let lat = codec.encode(&videos[0], &cfg).unwrap();
        assert_eq!(lat.dims(), (2, 4, 4, 12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shift_invariance_of_pixel_channels(seed in 0u64..1000, c in -0.5f32..0.5) {
            let cfg = ShapeConfig { frames: 5, height: 8, width: 8, ratios: [2, 2, 2], patch: 2, text_len: 0, latent_channels: 24 };
            let v = random_video(5, 8, 8, seed);
            let mut shifted = v.clone();
            shifted.frames.mapv_inplace(|x| x + c);
            let a = encode_lossless(&v, &cfg).unwrap();
            let b = encode_lossless(&shifted, &cfg).unwrap();
            for g in 0..3 {
                for ch in 0..24 {
                    if g == 0 && ch >= 12 { continue; }
                    for y in 0..4 { for x in 0..4 {
                        prop_assert_eq!(b.codes[[g, y, x, ch]], a.codes[[g, y, x, ch]] + c);
                    }}
                }
            }
        }

        #[test]
        fn budget_monotone(n in 0usize..6, h in 1usize..5, w in 1usize..5, l in 0usize..50) {
            let base = ShapeConfig { frames: 2 * n + 1, height: 8 * h, width: 8 * w, ratios: [4, 4, 2], patch: 2, text_len: l, latent_channels: 96 };
            let b0 = token_budget(&base).unwrap().total;
            for bigger in [
                ShapeConfig { frames: base.frames + 2, ..base },
                ShapeConfig { height: base.height + 8, ..base },
                ShapeConfig { width: base.width + 8, ..base },
                ShapeConfig { text_len: l + 1, ..base },
            ] {
                prop_assert!(token_budget(&bigger).unwrap().total >= b0);
            }
        }
    }
}
