//! The joint video–motion denoiser.
//!
//! Text, video and motion tokens share one attention over the concatenated
//! sequence; each modality keeps its own timestep-driven scale, shift and
//! gate for both sub-layers of every block.

use std::ops::Range;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_codec::ShapeConfig;
use crate::nn::{self, Builder, FeedForward, Init, Linear, SelfAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_time: usize,
    pub ff_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            blocks: 2,
            d_time: 128,
            ff_mult: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_time < 2 || self.d_time % 2 != 0 {
            return Err(Error::config("d_time must be even and at least 2"));
        }
        if self.ff_mult == 0 {
            return Err(Error::config("ff_mult must be positive"));
        }
        Ok(())
    }
}

pub const TEXT: usize = 0;
pub const VIDEO: usize = 1;
pub const MOTION: usize = 2;

/// Where each modality lives along the sequence axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spans {
    pub text: Range<usize>,
    pub video: Range<usize>,
    pub motion: Range<usize>,
}

impl Spans {
    pub fn new(text: usize, video: usize, motion: usize) -> Self {
        Self {
            text: 0..text,
            video: text..text + video,
            motion: text + video..text + video + motion,
        }
    }

    pub fn total(&self) -> usize {
        self.motion.end
    }

    pub fn get(&self, modality: usize) -> &Range<usize> {
        match modality {
            TEXT => &self.text,
            VIDEO => &self.video,
            _ => &self.motion,
        }
    }
}

/// Concatenated token features `[B, S, d]` with their modality spans.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub features: Tensor,
    pub spans: Spans,
}

impl TokenSequence {
    pub fn from_parts(text: &Tensor, video: &Tensor, motion: &Tensor) -> Result<Self> {
        let spans = Spans::new(text.dim(1)?, video.dim(1)?, motion.dim(1)?);
        let parts: Vec<&Tensor> = [text, video, motion].into_iter().filter(|t| t.dim(1).unwrap_or(0) > 0).collect();
        Ok(Self {
            features: Tensor::cat(&parts, 1)?,
            spans,
        })
    }

    pub fn part(&self, modality: usize) -> Result<Tensor> {
        let r = self.spans.get(modality);
        Ok(self.features.narrow(1, r.start, r.len())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every token attends to every token.
    Full,
    /// Tokens only attend within their own modality.
    ModalityLocal,
}

fn modality_mask(spans: &Spans, dtype: DType) -> Result<Tensor> {
    let s = spans.total();
    let modality = |i: usize| (0..3).find(|&m| spans.get(m).contains(&i)).unwrap_or(0);
    let data: Vec<f32> = (0..s * s)
        .map(|k| if modality(k / s) == modality(k % s) { 0.0 } else { -1e9 })
        .collect();
    Ok(Tensor::from_vec(data, (s, s), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Sinusoidal encoding followed by a two-layer map with SiLU.
#[derive(Debug, Clone)]
pub struct TimeEmbedder {
    first: Linear,
    second: Linear,
    dim: usize,
}

impl TimeEmbedder {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(&mut b.sub("first"), dim, dim)?,
            second: Linear::new(&mut b.sub("second"), dim, dim)?,
            dim,
        })
    }

    pub fn forward(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let pe = nn::sinusoidal_batch(ts, self.dim, dtype)?;
        self.second.forward(&nn::silu(&self.first.forward(&pe)?)?)
    }
}

/// Learned word table plus learned per-position embedding.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    table: Tensor,
    positions: Tensor,
}

impl TextEmbedder {
    pub fn new(b: &mut Builder, vocab: usize, len: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.param("table", &[vocab, dim], Init::Normal(0.02))?,
            positions: b.param("positions", &[len.max(1), dim], Init::Normal(0.02))?,
        })
    }

    /// `ids`: `[B, L]` u32 token ids.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let d = self.table.dim(1)?;
        if l == 0 {
            return Ok(Tensor::zeros((b, 0, d), self.table.dtype(), &Device::Cpu)?);
        }
        let flat = self.table.index_select(&ids.flatten_all()?, 0)?.reshape((b, l, d))?;
        Ok(flat.broadcast_add(&self.positions.narrow(0, 0, l)?)?)
    }
}

/// Rearrange `[B, T, H, W, C]` into `[B, T·(H/p)·(W/p), p·p·C]` patches.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 5 {
        return Err(Error::shape(format!("patchify expects rank 5, got {dims:?}")));
    }
    let (b, t, h, w, c) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}×{w} grid not divisible by patch {p}")));
    }
    Ok(x.reshape(vec![b, t, h / p, p, w / p, p, c])?
        .permute(vec![0, 1, 2, 4, 3, 5, 6])?
        .contiguous()?
        .reshape((b, t * (h / p) * (w / p), p * p * c))?)
}

/// Inverse of [`patchify`] for a `[t, h, w]` latent grid.
pub fn unpatchify(x: &Tensor, grid: [usize; 3], p: usize, c: usize) -> Result<Tensor> {
    let b = x.dim(0)?;
    let [t, h, w] = grid;
    Ok(x.reshape(vec![b, t, h / p, w / p, p, p, c])?
        .permute(vec![0, 1, 2, 4, 3, 5, 6])?
        .contiguous()?
        .reshape(vec![b, t, h, w, c])?)
}

/// Strided patch projection with factorized (time, height, width) positions.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Linear,
    pos_t: Tensor,
    pos_h: Tensor,
    pos_w: Tensor,
    patch: usize,
    grid: [usize; 3],
}

impl PatchEmbed {
    pub fn new(b: &mut Builder, in_channels: usize, shape: &ShapeConfig, dim: usize) -> Result<Self> {
        let p = shape.patch;
        let grid = shape.latent_grid();
        let [tt, th, tw] = shape.token_grid();
        let fan = p * p * in_channels;
        Ok(Self {
            proj: Linear::new(&mut b.sub("proj"), fan, dim)?,
            pos_t: b.param("pos_t", &[tt, dim], Init::Normal(0.02))?,
            pos_h: b.param("pos_h", &[th, dim], Init::Normal(0.02))?,
            pos_w: b.param("pos_w", &[tw, dim], Init::Normal(0.02))?,
            patch: p,
            grid,
        })
    }

    pub fn positions(&self) -> Result<Tensor> {
        let (t, d) = self.pos_t.dims2()?;
        let h = self.pos_h.dim(0)?;
        let w = self.pos_w.dim(0)?;
        let pos = self
            .pos_t
            .reshape((t, 1, 1, d))?
            .broadcast_add(&self.pos_h.reshape((1, h, 1, d))?)?
            .broadcast_add(&self.pos_w.reshape((1, 1, w, d))?)?;
        Ok(pos.reshape((t * h * w, d))?)
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&patchify(x, self.patch)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 5 || dims[1..4] != self.grid {
            return Err(Error::shape(format!("latent {dims:?} does not match grid {:?}", self.grid)));
        }
        Ok(self.project(x)?.broadcast_add(&self.positions()?)?)
    }
}

/// Per-modality `(scale, shift, gate)` for the attention and feedforward sub-layers.
#[derive(Debug, Clone)]
pub struct ModulationParams {
    /// Indexed `[modality][sublayer]`, each `(scale, shift, gate)` of shape `[B, d]`.
    pub params: [[(Tensor, Tensor, Tensor); 2]; 3],
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    modulation: Linear,
    attn: SelfAttention,
    ff: FeedForward,
    d_model: usize,
}

impl DitBlock {
    pub fn new(b: &mut Builder, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.d_model;
        // Scale and shift columns are random; every gate column starts at zero.
        let modulation = {
            let mut bm = b.sub("modulation");
            let cols = 18 * d;
            let mut w = Vec::with_capacity(cfg.d_time * cols);
            for _ in 0..cfg.d_time {
                for c in 0..cols {
                    w.push(if (c / d) % 3 == 2 { 0.0 } else { bm.normal() * 0.02 });
                }
            }
            let weight = bm.param_from("weight", &[cfg.d_time, cols], w)?;
            let bias = bm.param("bias", &[cols], Init::Zeros)?;
            Linear::from_parts(weight, Some(bias))
        };
        Ok(Self {
            modulation,
            attn: SelfAttention::new(&mut b.sub("attn"), d, cfg.heads)?,
            ff: FeedForward::new(&mut b.sub("ff"), d, cfg.ff_mult * d)?,
            d_model: d,
        })
    }

    pub fn modulation(&self, e_t: &Tensor) -> Result<ModulationParams> {
        let m = self.modulation.forward(&nn::silu(e_t)?)?;
        let d = self.d_model;
        let chunk = |i: usize| m.narrow(D::Minus1, i * d, d);
        let mut out: Vec<[(Tensor, Tensor, Tensor); 2]> = Vec::with_capacity(3);
        for modality in 0..3 {
            let mut subs = Vec::with_capacity(2);
            for sub in 0..2 {
                let base = (modality * 2 + sub) * 3;
                subs.push((chunk(base)?, chunk(base + 1)?, chunk(base + 2)?));
            }
            out.push([subs[0].clone(), subs[1].clone()]);
        }
        Ok(ModulationParams {
            params: [out[0].clone(), out[1].clone(), out[2].clone()],
        })
    }

    fn joint_input(&self, seq: &TokenSequence, mp: &ModulationParams, sub: usize) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(3);
        for m in 0..3 {
            if seq.spans.get(m).is_empty() {
                continue;
            }
            let (scale, shift, _) = &mp.params[m][sub];
            parts.push(nn::modulate(&nn::layer_norm(&seq.part(m)?)?, scale, shift)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    fn gated_residual(&self, seq: &TokenSequence, update: &Tensor, mp: &ModulationParams, sub: usize) -> Result<TokenSequence> {
        let mut parts = Vec::with_capacity(3);
        for m in 0..3 {
            let r = seq.spans.get(m);
            if r.is_empty() {
                continue;
            }
            let gate = mp.params[m][sub].2.unsqueeze(1)?;
            let delta = update.narrow(1, r.start, r.len())?.broadcast_mul(&gate)?;
            parts.push((seq.part(m)? + delta)?);
        }
        Ok(TokenSequence {
            features: Tensor::cat(&parts, 1)?,
            spans: seq.spans.clone(),
        })
    }

    pub fn forward(&self, seq: &TokenSequence, e_t: &Tensor, mask: AttentionMask) -> Result<TokenSequence> {
        let mp = self.modulation(e_t)?;
        let mask = match mask {
            AttentionMask::Full => None,
            AttentionMask::ModalityLocal => Some(modality_mask(&seq.spans, seq.features.dtype())?),
        };
        let joint = self.joint_input(seq, &mp, 0)?;
        let attn = self.attn.forward(&joint, mask.as_ref())?;
        let seq = self.gated_residual(seq, &attn, &mp, 0)?;
        let joint = self.joint_input(&seq, &mp, 1)?;
        let ff = self.ff.forward(&joint)?;
        self.gated_residual(&seq, &ff, &mp, 1)
    }

    /// Attention probabilities `[B, H, S, S]` of the first sub-layer.
    pub fn attention_probs(&self, seq: &TokenSequence, e_t: &Tensor) -> Result<Tensor> {
        let mp = self.modulation(e_t)?;
        let joint = self.joint_input(seq, &mp, 0)?;
        Ok(self.attn.forward_with_probs(&joint, None)?.1)
    }
}

/// Final adaptive norm and per-token projection back to latent patches.
#[derive(Debug, Clone)]
pub struct FinalLayer {
    modulation: Linear,
    proj: Linear,
    bias: Tensor,
    patch: usize,
    grid: [usize; 3],
    channels: usize,
}

impl FinalLayer {
    pub fn new(b: &mut Builder, cfg: &BackboneConfig, shape: &ShapeConfig, channels: usize) -> Result<Self> {
        let d = cfg.d_model;
        let p = shape.patch;
        Ok(Self {
            modulation: Linear::with_init(&mut b.sub("modulation"), cfg.d_time, 2 * d, Init::Zeros, Some(Init::Zeros))?,
            proj: Linear::with_init(&mut b.sub("proj"), d, p * p * channels, Init::FanIn(d), None)?,
            bias: b.param("bias", &[channels], Init::Zeros)?,
            patch: p,
            grid: shape.latent_grid(),
            channels,
        })
    }

    pub fn forward(&self, tokens: &Tensor, e_t: &Tensor) -> Result<Tensor> {
        let d = tokens.dim(D::Minus1)?;
        let m = self.modulation.forward(&nn::silu(e_t)?)?;
        let x = nn::modulate(&nn::layer_norm(tokens)?, &m.narrow(1, 0, d)?, &m.narrow(1, d, d)?)?;
        let (b, s, _) = x.dims3()?;
        let p = self.patch;
        let y = self
            .proj
            .forward(&x)?
            .reshape((b, s, p * p, self.channels))?
            .broadcast_add(&self.bias)?;
        unpatchify(&y.reshape((b, s, p * p * self.channels))?, self.grid, p, self.channels)
    }
}

/// Inputs to one denoiser evaluation. Latents are `[B, T, h, w, c]`; the
/// reference image latent has `T = 1`.
#[derive(Debug, Clone, Copy)]
pub struct SvimoInputs<'a> {
    pub z_video: &'a Tensor,
    pub z_image: &'a Tensor,
    pub z_motion: &'a Tensor,
    pub guidance: &'a Tensor,
    /// `[B, L]` u32 prompt ids.
    pub text_ids: &'a Tensor,
    pub timesteps: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct Svimo {
    cfg: BackboneConfig,
    shape: ShapeConfig,
    channels: usize,
    time: TimeEmbedder,
    text: TextEmbedder,
    video_embed: PatchEmbed,
    motion_embed: PatchEmbed,
    blocks: Vec<DitBlock>,
    video_out: FinalLayer,
    motion_out: FinalLayer,
}

impl Svimo {
    pub fn new(b: &mut Builder, cfg: &BackboneConfig, shape: &ShapeConfig, channels: usize, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        shape.validate()?;
        let d = cfg.d_model;
        let blocks = (0..cfg.blocks)
            .map(|i| DitBlock::new(&mut b.sub(&format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            shape: *shape,
            channels,
            time: TimeEmbedder::new(&mut b.sub("time"), cfg.d_time)?,
            text: TextEmbedder::new(&mut b.sub("text"), vocab_size, shape.text_len, d)?,
            video_embed: PatchEmbed::new(&mut b.sub("video_embed"), 2 * channels, shape, d)?,
            motion_embed: PatchEmbed::new(&mut b.sub("motion_embed"), 2 * channels, shape, d)?,
            blocks,
            video_out: FinalLayer::new(&mut b.sub("video_out"), cfg, shape, channels)?,
            motion_out: FinalLayer::new(&mut b.sub("motion_out"), cfg, shape, channels)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    pub fn embed_time(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        self.time.forward(ts, dtype)
    }

    pub fn embed_text(&self, ids: &Tensor) -> Result<Tensor> {
        self.text.forward(ids)
    }

    fn check_pair(&self, a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        let (da, db) = (a.dims(), b.dims());
        if da.len() != 5 || db.len() != 5 || da[0] != db[0] || da[2..] != db[2..] {
            return Err(Error::shape(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(())
    }

    /// Repeat the image latent over time, concatenate channels, patchify.
    pub fn embed_video(&self, z_video: &Tensor, z_image: &Tensor) -> Result<Tensor> {
        self.check_pair(z_video, z_image, "video latent vs image latent")?;
        if z_image.dim(1)? != 1 {
            return Err(Error::shape("image latent must have one temporal slot"));
        }
        let repeated = z_image.broadcast_as(z_video.dims())?.contiguous()?;
        self.video_embed.forward(&Tensor::cat(&[z_video, &repeated], D::Minus1)?)
    }

    pub fn embed_motion(&self, z_motion: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        self.check_pair(z_motion, guidance, "motion latent vs guidance")?;
        if z_motion.dims() != guidance.dims() {
            return Err(Error::shape(format!("motion {:?} vs guidance {:?}", z_motion.dims(), guidance.dims())));
        }
        self.motion_embed.forward(&Tensor::cat(&[z_motion, guidance], D::Minus1)?)
    }

    pub fn video_embedder(&self) -> &PatchEmbed {
        &self.video_embed
    }

    pub fn motion_embedder(&self) -> &PatchEmbed {
        &self.motion_embed
    }

    pub fn embed(&self, inputs: &SvimoInputs) -> Result<TokenSequence> {
        let text = self.embed_text(inputs.text_ids)?;
        let video = self.embed_video(inputs.z_video, inputs.z_image)?;
        let motion = self.embed_motion(inputs.z_motion, inputs.guidance)?;
        TokenSequence::from_parts(&text, &video, &motion)
    }

    pub fn run_blocks(&self, seq: TokenSequence, e_t: &Tensor, mask: AttentionMask) -> Result<TokenSequence> {
        self.blocks.iter().try_fold(seq, |s, blk| blk.forward(&s, e_t, mask))
    }

    /// Discard text, map video and motion spans back to latent grids.
    pub fn project_out(&self, seq: &TokenSequence, e_t: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.video_out.forward(&seq.part(VIDEO)?, e_t)?,
            self.motion_out.forward(&seq.part(MOTION)?, e_t)?,
        ))
    }

    pub fn forward(&self, inputs: &SvimoInputs) -> Result<(Tensor, Tensor)> {
        let dtype = inputs.z_video.dtype();
        if inputs.timesteps.len() != inputs.z_video.dim(0)? {
            return Err(Error::shape("one timestep per batch element is required"));
        }
        let e_t = self.embed_time(inputs.timesteps, dtype)?;
        let seq = self.run_blocks(self.embed(inputs)?, &e_t, AttentionMask::Full)?;
        self.project_out(&seq, &e_t)
    }

    pub fn shape(&self) -> &ShapeConfig {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Mean squared error of the video term plus that of the motion term.
pub fn svimo_loss(zhat_video: &Tensor, zhat_motion: &Tensor, z_video: &Tensor, z_motion: &Tensor) -> Result<Tensor> {
    for (a, b) in [(zhat_video, z_video), (zhat_motion, z_motion)] {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("prediction {:?} vs target {:?}", a.dims(), b.dims())));
        }
    }
    let v = (zhat_video - z_video)?.sqr()?.mean_all()?;
    let m = (zhat_motion - z_motion)?.sqr()?.mean_all()?;
    Ok((v + m)?)
}
