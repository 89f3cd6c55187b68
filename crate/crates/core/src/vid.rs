//! Vision-aware interaction denoiser: recovers hand joints and object
//! points from noisy motion, attending over multi-scale features of the
//! predicted video and motion latents.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Builder, CrossAttention, FeedForward, Init, Linear, SelfAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VidConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Width of the per-stream convolutional features.
    pub visual_channels: usize,
    /// Object point groups per half (tool or target); each becomes one token per frame.
    pub object_groups: usize,
    pub ff_mult: usize,
}

impl Default for VidConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            blocks: 2,
            visual_channels: 32,
            object_groups: 2,
            ff_mult: 4,
        }
    }
}

/// Sizes fixed by the data rather than the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VidShape {
    pub frames: usize,
    /// Joints across both hands.
    pub joints: usize,
    /// Points across tool and target.
    pub points: usize,
    /// Latent grid `[t, h, w]` and channels `c`.
    pub latent_grid: [usize; 3],
    pub latent_channels: usize,
}

/// 3×3×3 convolution over `[B, T, H, W, C]`, zero padded, with optional
/// spatial stride 2.
#[derive(Debug, Clone)]
pub struct Conv3d {
    lin: Linear,
    stride2: bool,
}

impl Conv3d {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, stride2: bool) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(b, 27 * cin, cout)?,
            stride2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, c) = x.dims5()?;
        if self.stride2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::shape(format!("strided conv needs even grid, got {h}×{w}")));
        }
        let xp = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut cols = Vec::with_capacity(27);
        for dt in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut piece = xp.narrow(1, dt, t)?.narrow(2, dy, h)?.narrow(3, dx, w)?;
                    if self.stride2 {
                        piece = piece
                            .reshape(vec![b, t, h / 2, 2, w / 2, 2, c])?
                            .narrow(3, 0, 1)?
                            .narrow(5, 0, 1)?
                            .reshape(vec![b, t, h / 2, w / 2, c])?;
                    }
                    cols.push(piece);
                }
            }
        }
        self.lin.forward(&Tensor::cat(&cols, D::Minus1)?)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    stem: Linear,
    conv1: Conv3d,
    conv2: Conv3d,
}

impl Stream {
    fn new(b: &mut Builder, c: usize, dv: usize) -> Result<Self> {
        Ok(Self {
            stem: Linear::new(&mut b.sub("stem"), c, dv)?,
            conv1: Conv3d::new(&mut b.sub("conv1"), dv, dv, false)?,
            conv2: Conv3d::new(&mut b.sub("conv2"), dv, dv, true)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = nn::silu(&self.stem.forward(z)?)?;
        let s1 = nn::silu(&self.conv1.forward(&x)?)?;
        let s2 = nn::silu(&self.conv2.forward(&s1)?)?;
        Ok((s1, s2))
    }
}

fn grid_positions(b: &mut Builder, grid: [usize; 3], d: usize) -> Result<[Tensor; 3]> {
    Ok([
        b.param("pos_t", &[grid[0], d], Init::Normal(0.02))?,
        b.param("pos_h", &[grid[1], d], Init::Normal(0.02))?,
        b.param("pos_w", &[grid[2], d], Init::Normal(0.02))?,
    ])
}

fn combine_positions(pos: &[Tensor; 3]) -> Result<Tensor> {
    let (t, d) = pos[0].dims2()?;
    let h = pos[1].dim(0)?;
    let w = pos[2].dim(0)?;
    let p = pos[0]
        .reshape((t, 1, 1, d))?
        .broadcast_add(&pos[1].reshape((1, h, 1, d))?)?
        .broadcast_add(&pos[2].reshape((1, 1, w, d))?)?;
    Ok(p.reshape((t * h * w, d))?)
}

#[derive(Debug, Clone)]
struct VidBlock {
    modulation: Linear,
    self_attn: SelfAttention,
    cross_attn: CrossAttention,
    ff: FeedForward,
}

impl VidBlock {
    fn new(b: &mut Builder, cfg: &VidConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            modulation: Linear::with_init(&mut b.sub("modulation"), d, 6 * d, Init::Normal(0.02), Some(Init::Zeros))?,
            self_attn: SelfAttention::new(&mut b.sub("self_attn"), d, cfg.heads)?,
            cross_attn: CrossAttention::new(&mut b.sub("cross_attn"), d, d, cfg.heads)?,
            ff: FeedForward::new(&mut b.sub("ff"), d, cfg.ff_mult * d)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor, e_t: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let m = self.modulation.forward(&nn::silu(e_t)?)?;
        let chunk = |i: usize| m.narrow(1, i * d, d);
        let h = nn::modulate(&nn::layer_norm(x)?, &chunk(0)?, &chunk(1)?)?;
        let x = (x + self.self_attn.forward(&h, None)?)?;
        let h = nn::modulate(&nn::layer_norm(&x)?, &chunk(2)?, &chunk(3)?)?;
        let x = (&x + self.cross_attn.forward(&h, ctx)?)?;
        let h = nn::modulate(&nn::layer_norm(&x)?, &chunk(4)?, &chunk(5)?)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Vid {
    cfg: VidConfig,
    shape: VidShape,
    video: Stream,
    motion: Stream,
    fuse1: Linear,
    fuse2: Linear,
    pos1: [Tensor; 3],
    pos2: [Tensor; 3],
    time1: Linear,
    time2: Linear,
    hand_in: Linear,
    object_in: Linear,
    frame_pos: Tensor,
    kind: Tensor,
    blocks: Vec<VidBlock>,
    hand_out: Linear,
    object_out: Linear,
}

impl Vid {
    pub fn new(b: &mut Builder, cfg: &VidConfig, shape: &VidShape) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 || cfg.d_model % 2 != 0 {
            return Err(Error::config("vid d_model must be even and divisible by heads"));
        }
        let groups = 2 * cfg.object_groups;
        if cfg.object_groups == 0 || shape.points % groups != 0 {
            return Err(Error::config(format!(
                "{} object points cannot form {groups} equal groups",
                shape.points
            )));
        }
        let [t, h, w] = shape.latent_grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config("latent grid must be even for the second scale"));
        }
        let (d, dv, c) = (cfg.d_model, cfg.visual_channels, shape.latent_channels);
        let group_size = shape.points / groups;
        let blocks = (0..cfg.blocks)
            .map(|i| VidBlock::new(&mut b.sub(&format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            shape: *shape,
            video: Stream::new(&mut b.sub("video"), c, dv)?,
            motion: Stream::new(&mut b.sub("motion"), c, dv)?,
            fuse1: Linear::new(&mut b.sub("fuse1"), 2 * dv, d)?,
            fuse2: Linear::new(&mut b.sub("fuse2"), 2 * dv, d)?,
            pos1: grid_positions(&mut b.sub("scale1"), [t, h, w], d)?,
            pos2: grid_positions(&mut b.sub("scale2"), [t, h / 2, w / 2], d)?,
            time1: Linear::new(&mut b.sub("time1"), d, d)?,
            time2: Linear::new(&mut b.sub("time2"), d, d)?,
            hand_in: Linear::new(&mut b.sub("hand_in"), shape.joints * 3, d)?,
            object_in: Linear::new(&mut b.sub("object_in"), group_size * 3, d)?,
            frame_pos: b.param("frame_pos", &[shape.frames, d], Init::Normal(0.02))?,
            kind: b.param("kind", &[1 + groups, d], Init::Normal(0.02))?,
            blocks,
            hand_out: Linear::new(&mut b.sub("hand_out"), d, shape.joints * 3)?,
            object_out: Linear::new(&mut b.sub("object_out"), d, group_size * 3)?,
        })
    }

    pub fn config(&self) -> &VidConfig {
        &self.cfg
    }

    /// Fused multi-scale visual tokens `[B, S_vis, d]`.
    pub fn visual_tokens(&self, zhat_video: &Tensor, zhat_motion: &Tensor) -> Result<Tensor> {
        if zhat_video.dims() != zhat_motion.dims() {
            return Err(Error::shape(format!(
                "video latent {:?} vs motion latent {:?}",
                zhat_video.dims(),
                zhat_motion.dims()
            )));
        }
        let b = zhat_video.dim(0)?;
        let (v1, v2) = self.video.forward(zhat_video)?;
        let (m1, m2) = self.motion.forward(zhat_motion)?;
        let flat = |x: Tensor| -> Result<Tensor> {
            let (b, t, h, w, c) = x.dims5()?;
            Ok(x.reshape((b, t * h * w, c))?)
        };
        let s1 = flat(self.fuse1.forward(&Tensor::cat(&[&v1, &m1], D::Minus1)?)?)?
            .broadcast_add(&combine_positions(&self.pos1)?)?;
        let s2 = flat(self.fuse2.forward(&Tensor::cat(&[&v2, &m2], D::Minus1)?)?)?
            .broadcast_add(&combine_positions(&self.pos2)?)?;
        let out = Tensor::cat(&[&s1, &s2], 1)?;
        debug_assert_eq!(out.dim(0)?, b);
        Ok(nn::layer_norm(&out)?)
    }

    fn time_embedding(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let pe = nn::sinusoidal_batch(ts, self.cfg.d_model, dtype)?;
        self.time2.forward(&nn::silu(&self.time1.forward(&pe)?)?)
    }

    fn motion_tokens(&self, hands: &Tensor, objects: &Tensor) -> Result<Tensor> {
        let (b, n, j, _) = hands.dims4()?;
        let (_, no, k, _) = objects.dims4()?;
        if n != self.shape.frames || no != n || j != self.shape.joints || k != self.shape.points {
            return Err(Error::shape(format!(
                "motion {:?}/{:?} does not match frames {} joints {} points {}",
                hands.dims(),
                objects.dims(),
                self.shape.frames,
                self.shape.joints,
                self.shape.points
            )));
        }
        let g = 2 * self.cfg.object_groups;
        let d = self.cfg.d_model;
        let hand = self.hand_in.forward(&hands.reshape((b, n, j * 3))?)?;
        let hand = hand.broadcast_add(&self.frame_pos.broadcast_add(&self.kind.narrow(0, 0, 1)?)?)?;
        let obj = self.object_in.forward(&objects.reshape((b, n, g, (k / g) * 3))?)?;
        let obj_pos = self
            .frame_pos
            .reshape((n, 1, d))?
            .broadcast_add(&self.kind.narrow(0, 1, g)?.reshape((1, g, d))?)?;
        let obj = obj.broadcast_add(&obj_pos)?.reshape((b, n * g, d))?;
        Ok(Tensor::cat(&[&hand, &obj], 1)?)
    }

    /// Predict clean `(hands [B,N,J,3], objects [B,N,K,3])` from noisy motion.
    pub fn forward(
        &self,
        hands_t: &Tensor,
        objects_t: &Tensor,
        timesteps: &[usize],
        zhat_video: &Tensor,
        zhat_motion: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let ctx = self.visual_tokens(zhat_video, zhat_motion)?;
        let e_t = self.time_embedding(timesteps, hands_t.dtype())?;
        let mut x = self.motion_tokens(hands_t, objects_t)?;
        for blk in &self.blocks {
            x = blk.forward(&x, &ctx, &e_t)?;
        }
        let (b, n, j, _) = hands_t.dims4()?;
        let k = objects_t.dim(2)?;
        let g = 2 * self.cfg.object_groups;
        let hands = self.hand_out.forward(&x.narrow(1, 0, n)?)?.reshape((b, n, j, 3))?;
        let objects = self
            .object_out
            .forward(&x.narrow(1, n, n * g)?)?
            .reshape((b, n, k, 3))?;
        Ok((hands, objects))
    }
}

/// Per-set symmetric Chamfer distance of `a [M, P, 3]` and `b [M, Q, 3]`:
/// half the sum of the two mean nearest squared distances. Returns `[M]`.
pub fn chamfer_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p, _) = a.dims3()?;
    let (mb, q, _) = b.dims3()?;
    if m != mb || p == 0 || q == 0 {
        return Err(Error::shape(format!("chamfer of {:?} and {:?}", a.dims(), b.dims())));
    }
    let d = a.unsqueeze(2)?.broadcast_sub(&b.unsqueeze(1)?)?.sqr()?.sum(3)?;
    let ia = d.argmin_keepdim(2)?;
    let ib = d.argmin_keepdim(1)?;
    let ab = d.gather(&ia, 2)?.squeeze(2)?.mean(1)?;
    let ba = d.gather(&ib, 1)?.squeeze(1)?.mean(1)?;
    Ok(((ab + ba)? * 0.5)?)
}

pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(chamfer_batched(&a.unsqueeze(0)?, &b.unsqueeze(0)?)?.squeeze(0)?)
}

pub const HAND_WEIGHTS: [f64; 3] = [1.0, 0.2, 0.05];
pub const OBJECT_DYNAMICS_WEIGHT: f64 = 0.1;

fn frame_diff(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(1)?;
    Ok((x.narrow(1, 1, n - 1)? - x.narrow(1, 0, n - 1)?)?)
}

/// Weighted position, velocity and acceleration error of `[B, N, J, 3]`
/// trajectories, each term a mean over (B, N, J) of squared 3-vector norms.
pub fn hand_loss(gt: &Tensor, pred: &Tensor) -> Result<Tensor> {
    if gt.dims() != pred.dims() || gt.rank() != 4 {
        return Err(Error::shape(format!("hand loss of {:?} and {:?}", gt.dims(), pred.dims())));
    }
    let e = (pred - gt)?;
    let term = |x: &Tensor| -> Result<Tensor> { Ok(x.sqr()?.sum(D::Minus1)?.mean_all()?) };
    let mut loss = (term(&e)? * HAND_WEIGHTS[0])?;
    let n = e.dim(1)?;
    if n >= 2 {
        let v = frame_diff(&e)?;
        loss = (loss + (term(&v)? * HAND_WEIGHTS[1])?)?;
        if n >= 3 {
            loss = (loss + (term(&frame_diff(&v)?)? * HAND_WEIGHTS[2])?)?;
        }
    }
    Ok(loss)
}

fn part_loss(gt: &Tensor, pred: &Tensor) -> Result<Tensor> {
    let (b, n, k, _) = gt.dims4()?;
    let l1 = chamfer_batched(&gt.reshape((b * n, k, 3))?, &pred.reshape((b * n, k, 3))?)?.mean_all()?;
    if n < 2 {
        return Ok(l1);
    }
    let pairs = |x: &Tensor| -> Result<Tensor> {
        let cur = x.narrow(1, 1, n - 1)?.reshape((b * (n - 1), k, 3))?;
        let prev = x.narrow(1, 0, n - 1)?.reshape((b * (n - 1), k, 3))?;
        chamfer_batched(&cur, &prev)
    };
    let l2 = (pairs(gt)? - pairs(pred)?)?.abs()?.mean_all()?;
    Ok((l1 + (l2 * OBJECT_DYNAMICS_WEIGHT)?)?)
}

/// Mean over tool and target of the per-frame Chamfer error plus the
/// weighted mismatch in frame-to-frame Chamfer change.
pub fn object_loss(gt: &Tensor, pred: &Tensor) -> Result<Tensor> {
    if gt.dims() != pred.dims() || gt.rank() != 4 {
        return Err(Error::shape(format!("object loss of {:?} and {:?}", gt.dims(), pred.dims())));
    }
    let k = gt.dim(2)?;
    if k % 2 != 0 || k == 0 {
        return Err(Error::shape(format!("{k} object points cannot split into tool and target")));
    }
    let h = k / 2;
    let tool = part_loss(&gt.narrow(2, 0, h)?, &pred.narrow(2, 0, h)?)?;
    let target = part_loss(&gt.narrow(2, h, h)?, &pred.narrow(2, h, h)?)?;
    Ok(((tool + target)? * 0.5)?)
}

pub fn vid_loss(hands: &Tensor, hands_hat: &Tensor, objects: &Tensor, objects_hat: &Tensor) -> Result<Tensor> {
    Ok((hand_loss(hands, hands_hat)? + object_loss(objects, objects_hat)?)?)
}
