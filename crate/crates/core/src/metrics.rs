//! Video quality scores (consistency, smoothness, dynamics) and motion
//! scores (joint error, smoothness, Chamfer, autoencoder-feature FID).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_codec::VideoTensor;
use crate::motion::{HandTrajectory, ObjectCloudSeq};
use crate::nn::{self, Adam, AdamConfig, Builder, Linear, ParamStore};
use crate::rng::{streams, RngStream};
use crate::tensor_io::HostTensor;

/// A value with any caveats raised while computing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub flags: Vec<String>,
}

impl Flagged {
    fn clean(value: f64) -> Self {
        Self { value, flags: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Restrict to foreground pixels.
    Subject,
    /// Restrict to background pixels.
    Background,
}

pub const GRID: usize = 8;
pub const ORIENTATION_BINS: usize = 8;
pub const FEATURE_DIM: usize = GRID * GRID + ORIENTATION_BINS;

fn gray(frame: ArrayView3<f32>) -> ndarray::Array2<f64> {
    let (h, w, _) = frame.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        (frame[[y, x, 0]] as f64 + frame[[y, x, 1]] as f64 + frame[[y, x, 2]] as f64) / 3.0
    })
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Masked 8×8 area-averaged grayscale plus an 8-bin signed gradient
/// orientation histogram; each part unit-normalized, then the whole.
pub fn frame_features(frame: ArrayView3<f32>, mask: ArrayView2<bool>) -> Vec<f64> {
    let (h, w, _) = frame.dim();
    let g = gray(frame);
    let m = |y: usize, x: usize| mask[[y, x]];
    let mut cells = vec![0.0; GRID * GRID];
    for cy in 0..GRID {
        for cx in 0..GRID {
            let (y0, y1) = (cy * h / GRID, (cy + 1) * h / GRID);
            let (x0, x1) = (cx * w / GRID, (cx + 1) * w / GRID);
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            if area == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    if m(y, x) {
                        s += g[[y, x]];
                    }
                }
            }
            cells[cy * GRID + cx] = s / area;
        }
    }
    let mut hist = vec![0.0; ORIENTATION_BINS];
    let masked = |y: usize, x: usize| if m(y, x) { g[[y, x]] } else { 0.0 };
    for y in 0..h {
        for x in 0..w {
            if !m(y, x) {
                continue;
            }
            let gx = if x + 1 < w { masked(y, x + 1) - masked(y, x) } else { 0.0 };
            let gy = if y + 1 < h { masked(y + 1, x) - masked(y, x) } else { 0.0 };
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let a = gy.atan2(gx) + std::f64::consts::PI;
            let bin = ((a / (2.0 * std::f64::consts::PI) * ORIENTATION_BINS as f64).floor() as usize) % ORIENTATION_BINS;
            hist[bin] += mag;
        }
    }
    unit(&mut cells);
    unit(&mut hist);
    let mut out: Vec<f64> = cells.into_iter().chain(hist).collect();
    unit(&mut out);
    out
}

/// Cosine of two unit-or-zero vectors; two zero vectors count as identical.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    match (na > 0.0, nb > 0.0) {
        (false, false) => 1.0,
        (true, true) => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb).sqrt(),
        _ => 0.0,
    }
}

/// Per-frame features for one mask kind. Frames whose selected region is
/// empty fall back to the whole frame.
pub fn video_features(video: &VideoTensor, foreground: &Array3<bool>, kind: FeatureKind) -> Result<(Vec<Vec<f64>>, bool)> {
    let (n, h, w) = foreground.dim();
    if n != video.len() || h != video.height() || w != video.width() {
        return Err(Error::shape(format!(
            "mask {:?} does not match video {:?}",
            foreground.dim(),
            video.frames.dim()
        )));
    }
    let mut fallback = false;
    let mut out = Vec::with_capacity(n);
    for f in 0..n {
        let fg = foreground.index_axis(ndarray::Axis(0), f);
        let mut sel = match kind {
            FeatureKind::Subject => fg.to_owned(),
            FeatureKind::Background => fg.mapv(|v| !v),
        };
        if !sel.iter().any(|&v| v) {
            fallback = true;
            sel.fill(true);
        }
        out.push(frame_features(video.frames.index_axis(ndarray::Axis(0), f), sel.view()));
    }
    Ok((out, fallback))
}

/// Mean over t ≥ 2 of the average of cos(d₁, d_t) and cos(d_{t−1}, d_t).
pub fn consistency_from_features(feats: &[Vec<f64>]) -> Result<f64> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::shape("consistency needs at least 2 frames"));
    }
    let sum: f64 = (1..n)
        .map(|t| 0.5 * (cosine(&feats[0], &feats[t]) + cosine(&feats[t - 1], &feats[t])))
        .sum();
    Ok(sum / (n - 1) as f64)
}

fn consistency(video: &VideoTensor, foreground: &Array3<bool>, kind: FeatureKind) -> Result<Flagged> {
    let (feats, fallback) = video_features(video, foreground, kind)?;
    let raw = consistency_from_features(&feats)?;
    let mut out = Flagged::clean(raw.clamp(0.0, 1.0));
    if fallback {
        out.flags.push(format!("{kind:?} mask empty on some frame; whole-frame features used").to_lowercase());
    }
    if raw < 0.0 {
        out.flags.push(format!("negative consistency {raw} clamped to 0"));
    }
    Ok(out)
}

pub fn subject_consistency(video: &VideoTensor, foreground: &Array3<bool>) -> Result<Flagged> {
    consistency(video, foreground, FeatureKind::Subject)
}

pub fn background_consistency(video: &VideoTensor, foreground: &Array3<bool>) -> Result<Flagged> {
    consistency(video, foreground, FeatureKind::Background)
}

/// Drop every other frame starting with the first, rebuild each from its
/// kept neighbours by averaging, and score `1 − MAE/255` on a 0–255 scale.
/// The first dropped frame has only its right neighbour.
pub fn temporal_smoothness(video: &VideoTensor) -> Result<Flagged> {
    let mut n = video.len();
    if n < 4 {
        return Err(Error::shape(format!("temporal smoothness needs at least 4 frames, got {n}")));
    }
    let mut flags = Vec::new();
    if n % 2 != 0 {
        n -= 1;
        flags.push("odd frame count; trailing frame dropped".to_string());
    }
    let fr = &video.frames;
    let per_frame = fr.len() / video.len();
    let mut total = 0.0;
    for k in (0..n).step_by(2) {
        let next = fr.index_axis(ndarray::Axis(0), k + 1);
        let cur = fr.index_axis(ndarray::Axis(0), k);
        let mut abs = 0.0;
        if k == 0 {
            for (a, b) in cur.iter().zip(next.iter()) {
                abs += (*a as f64 - *b as f64).abs();
            }
        } else {
            let prev = fr.index_axis(ndarray::Axis(0), k - 1);
            for ((a, p), q) in cur.iter().zip(prev.iter()).zip(next.iter()) {
                abs += (*a as f64 - 0.5 * (*p as f64 + *q as f64)).abs();
            }
        }
        let mae = 255.0 * abs / per_frame as f64;
        total += (255.0 - mae) / 255.0;
    }
    Ok(Flagged {
        value: total / (n / 2) as f64,
        flags,
    })
}

pub const FLOW_BLOCK: usize = 4;
pub const FLOW_RADIUS: i64 = 3;
pub const TOP_FRACTION: f64 = 0.05;

fn gray255(video: &VideoTensor, f: usize) -> ndarray::Array2<f64> {
    gray(video.frames.index_axis(ndarray::Axis(0), f)).mapv(|v| 255.0 * v)
}

/// Block-matching displacement for every block of `a` found in `b`, using
/// mean-removed SAD. Ties resolve to the smallest displacement.
pub fn block_flow(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> Vec<((usize, usize), (i64, i64))> {
    let (h, w) = a.dim();
    let bs = FLOW_BLOCK;
    let mut offsets: Vec<(i64, i64)> = (-FLOW_RADIUS..=FLOW_RADIUS)
        .flat_map(|dy| (-FLOW_RADIUS..=FLOW_RADIUS).map(move |dx| (dy, dx)))
        .collect();
    offsets.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    let block_mean = |img: &ndarray::Array2<f64>, y0: usize, x0: usize| {
        let mut s = 0.0;
        for y in y0..y0 + bs {
            for x in x0..x0 + bs {
                s += img[[y, x]];
            }
        }
        s / (bs * bs) as f64
    };
    let mut out = Vec::new();
    for by in (0..h.saturating_sub(bs - 1)).step_by(bs) {
        for bx in (0..w.saturating_sub(bs - 1)).step_by(bs) {
            let ma = block_mean(a, by, bx);
            let mut best = (f64::INFINITY, (0i64, 0i64));
            for &(dy, dx) in &offsets {
                let (y0, x0) = (by as i64 + dy, bx as i64 + dx);
                if y0 < 0 || x0 < 0 || y0 as usize + bs > h || x0 as usize + bs > w {
                    continue;
                }
                let (y0, x0) = (y0 as usize, x0 as usize);
                let mb = block_mean(b, y0, x0);
                let mut sad = 0.0;
                for y in 0..bs {
                    for x in 0..bs {
                        sad += ((a[[by + y, bx + x]] - ma) - (b[[y0 + y, x0 + x]] - mb)).abs();
                    }
                }
                // Strict improvement keeps the smaller displacement on ties.
                if sad < best.0 - 1e-9 {
                    best = (sad, (dy, dx));
                }
            }
            out.push(((by, bx), best.1));
        }
    }
    out
}

/// Mean of the top 5% per-pixel flow magnitudes over all consecutive pairs.
pub fn dynamic_score(video: &VideoTensor) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::shape("dynamic degree needs at least 2 frames"));
    }
    let mut mags = Vec::new();
    for f in 1..video.len() {
        let (a, b) = (gray255(video, f - 1), gray255(video, f));
        for (_, (dy, dx)) in block_flow(&a, &b) {
            let m = ((dy * dy + dx * dx) as f64).sqrt();
            mags.extend(std::iter::repeat(m).take(FLOW_BLOCK * FLOW_BLOCK));
        }
    }
    if mags.is_empty() {
        return Ok(0.0);
    }
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((TOP_FRACTION * mags.len() as f64).ceil() as usize).max(1);
    Ok(mags[..k].iter().sum::<f64>() / k as f64)
}

/// Fraction of videos whose dynamic score exceeds `tau`.
pub fn dynamic_degree(videos: &[&VideoTensor], tau: f64) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::shape("dynamic degree of an empty set"));
    }
    let mut dynamic = 0usize;
    for v in videos {
        if dynamic_score(v)? > tau {
            dynamic += 1;
        }
    }
    Ok(dynamic as f64 / videos.len() as f64)
}

pub fn overall(subj: f64, bkg: f64, tsmoo: f64, dyn_: f64) -> f64 {
    subj * bkg * tsmoo * dyn_
}

pub fn mpjpe(h: &HandTrajectory, hhat: &HandTrajectory) -> Result<f64> {
    if h.joints.dim() != hhat.joints.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", h.joints.dim(), hhat.joints.dim())));
    }
    let (n, j, _) = h.joints.dim();
    let mut s = 0.0;
    for f in 0..n {
        for k in 0..j {
            let d: f64 = (0..3)
                .map(|c| (h.joints[[f, k, c]] as f64 - hhat.joints[[f, k, c]] as f64).powi(2))
                .sum();
            s += d.sqrt();
        }
    }
    Ok(s / (n * j) as f64)
}

/// Mean norm of the second temporal difference over interior frames and joints.
pub fn motion_smoothness(h: &HandTrajectory) -> Result<f64> {
    let (n, j, _) = h.joints.dim();
    if n < 3 {
        return Err(Error::shape(format!("motion smoothness needs at least 3 frames, got {n}")));
    }
    let p = |f: usize, k: usize, c: usize| h.joints[[f, k, c]] as f64;
    let mut s = 0.0;
    for f in 1..n - 1 {
        for k in 0..j {
            let d: f64 = (0..3)
                .map(|c| (p(f + 1, k, c) - 2.0 * p(f, k, c) + p(f - 1, k, c)).powi(2))
                .sum();
            s += d.sqrt();
        }
    }
    Ok(s / ((n - 2) * j) as f64)
}

/// Symmetric squared-distance Chamfer of two point sets (host, f64).
pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::shape("chamfer of an empty set"));
    }
    let d2 = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
    let dir = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(0.5 * (dir(a, b) + dir(b, a)))
}

fn frame_points(o: &ObjectCloudSeq, f: usize) -> Vec<[f64; 3]> {
    (0..o.num_points())
        .map(|k| [0, 1, 2].map(|c| o.points[[f, k, c]] as f64))
        .collect()
}

/// Mean over frames of the per-frame Chamfer distance of the full cloud.
pub fn object_chamfer(o: &ObjectCloudSeq, ohat: &ObjectCloudSeq) -> Result<f64> {
    if o.points.dim() != ohat.points.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", o.points.dim(), ohat.points.dim())));
    }
    let n = o.frames();
    let mut s = 0.0;
    for f in 0..n {
        s += chamfer_points(&frame_points(o, f), &frame_points(ohat, f))?;
    }
    Ok(s / n as f64)
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows of
/// equal length).
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<Flagged> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::shape("FID needs at least 2 samples per set"));
    }
    let d = real[0].len();
    if real.iter().chain(generated).any(|r| r.len() != d) || d == 0 {
        return Err(Error::shape("FID feature rows differ in length"));
    }
    let stats = |set: &[Vec<f64>]| {
        let n = set.len();
        let x = DMatrix::from_fn(n, d, |i, j| set[i][j]);
        let mu = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mu, cov)
    };
    let (mu_r, mut cov_r) = stats(real);
    let (mu_g, mut cov_g) = stats(generated);
    let mut flags = Vec::new();
    let singular = |c: &DMatrix<f64>| {
        let ev = SymmetricEigen::new(c.clone()).eigenvalues;
        let max = ev.iter().cloned().fold(0.0f64, f64::max);
        ev.iter().any(|&l| l <= 1e-12 * max.max(1e-300))
    };
    if singular(&cov_r) || singular(&cov_g) {
        flags.push("singular covariance; 1e-6 added to the diagonal".to_string());
        for i in 0..d {
            cov_r[(i, i)] += 1e-6;
            cov_g[(i, i)] += 1e-6;
        }
    }
    let sqrt_psd = |c: &DMatrix<f64>| {
        let e = SymmetricEigen::new(c.clone());
        let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
        &e.eigenvectors * s * e.eigenvectors.transpose()
    };
    let root_r = sqrt_psd(&cov_r);
    let mut inner = &root_r * &cov_g * &root_r;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = &mu_r - &mu_g;
    let value = diff.dot(&diff) + cov_r.trace() + cov_g.trace() - 2.0 * tr_cross;
    Ok(Flagged {
        value: value.max(0.0),
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub target_mse: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            bottleneck: 64,
            steps: 3000,
            learning_rate: 1e-3,
            target_mse: 1e-2,
            seed: 0,
        }
    }
}

/// Flatten hands and objects of one sample into a single feature row.
pub fn flatten_motion(h: &HandTrajectory, o: &ObjectCloudSeq) -> Vec<f32> {
    h.joints.iter().chain(o.points.iter()).copied().collect()
}

/// Encoder–decoder MLP over flattened motion; the bottleneck gives FID features.
#[derive(Debug)]
pub struct MotionAutoencoder {
    store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    input_dim: usize,
    cfg: AutoencoderConfig,
}

impl MotionAutoencoder {
    pub fn new(input_dim: usize, cfg: &AutoencoderConfig) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = RngStream::new(cfg.seed, streams::INIT);
        let mut b = Builder::new(&mut store, &mut rng, "ae");
        let enc1 = Linear::new(&mut b.sub("enc1"), input_dim, cfg.hidden)?;
        let enc2 = Linear::new(&mut b.sub("enc2"), cfg.hidden, cfg.bottleneck)?;
        let dec1 = Linear::new(&mut b.sub("dec1"), cfg.bottleneck, cfg.hidden)?;
        let dec2 = Linear::new(&mut b.sub("dec2"), cfg.hidden, input_dim)?;
        Ok(Self {
            store,
            enc1,
            enc2,
            dec1,
            dec2,
            input_dim,
            cfg: *cfg,
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.cfg.bottleneck
    }

    fn rows(&self, rows: &[Vec<f32>]) -> Result<Tensor> {
        if rows.iter().any(|r| r.len() != self.input_dim) {
            return Err(Error::shape(format!("autoencoder expects rows of {}", self.input_dim)));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (rows.len(), self.input_dim), &Device::Cpu)?)
    }

    fn encode_t(&self, x: &Tensor) -> Result<Tensor> {
        self.enc2.forward(&nn::silu(&self.enc1.forward(x)?)?)
    }

    fn decode_t(&self, z: &Tensor) -> Result<Tensor> {
        self.dec2.forward(&nn::silu(&self.dec1.forward(z)?)?)
    }

    pub fn encode(&self, rows: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let z = self.encode_t(&self.rows(rows)?)?.to_dtype(DType::F64)?;
        Ok(z.to_vec2::<f64>()?)
    }

    /// Mean squared reconstruction error over all rows and elements.
    pub fn reconstruction_mse(&self, rows: &[Vec<f32>]) -> Result<f64> {
        let x = self.rows(rows)?;
        let y = self.decode_t(&self.encode_t(&x)?)?;
        Ok((y - &x)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn to_host(&self) -> Result<BTreeMap<String, HostTensor>> {
        self.store.to_host()
    }

    pub fn load_host(&self, host: &BTreeMap<String, HostTensor>) -> Result<()> {
        self.store.load_host(host)
    }
}

/// Train to the configured reconstruction target or fail with `NonConvergence`.
pub fn train_motion_autoencoder(rows: &[Vec<f32>], cfg: &AutoencoderConfig) -> Result<MotionAutoencoder> {
    if rows.len() < 8 {
        return Err(Error::config(format!("autoencoder needs at least 8 samples, got {}", rows.len())));
    }
    let ae = MotionAutoencoder::new(rows[0].len(), cfg)?;
    let x = ae.rows(rows)?;
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        lr_warmup_steps: 0,
        ..AdamConfig::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..cfg.steps {
        let y = ae.decode_t(&ae.encode_t(&x)?)?;
        let loss = (y - &x)?.sqr()?.mean_all()?;
        last = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !last.is_finite() {
            return Err(Error::Numerical(format!("autoencoder loss is {last}")));
        }
        if last < 0.1 * cfg.target_mse {
            break;
        }
        let grads = loss.backward()?;
        opt.step(&ae.store, &grads, |_| true)?;
    }
    let mse = ae.reconstruction_mse(rows)?;
    if !(mse < cfg.target_mse) {
        return Err(Error::NonConvergence(format!(
            "autoencoder reconstruction {mse:.3e} (last step {last:.3e}) above target {:.1e} after {} steps",
            cfg.target_mse, cfg.steps
        )));
    }
    Ok(ae)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub subj: f64,
    pub bkg: f64,
    pub tsmoo: f64,
    pub dynamic_score: f64,
    pub mpjpe: f64,
    pub msmoo: f64,
    pub chamfer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subj: f64,
    pub bkg: f64,
    pub tsmoo: f64,
    pub dyn_: f64,
    pub overall: f64,
    pub mpjpe: f64,
    pub msmoo: f64,
    pub chamfer: f64,
    pub fid: Option<f64>,
    pub tau_op: f64,
    pub flags: Vec<String>,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn overall_consistent(&self) -> bool {
        (self.overall - overall(self.subj, self.bkg, self.tsmoo, self.dyn_)).abs() <= 1e-9
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric    value\n");
        for (k, v) in [
            ("subj", self.subj),
            ("bkg", self.bkg),
            ("tsmoo", self.tsmoo),
            ("dyn", self.dyn_),
            ("overall", self.overall),
            ("mpjpe", self.mpjpe),
            ("msmoo", self.msmoo),
            ("chamfer", self.chamfer),
        ] {
            s.push_str(&format!("{k:<9} {v:.4}\n"));
        }
        match self.fid {
            Some(f) => s.push_str(&format!("{:<9} {f:.4}\n", "fid")),
            None => s.push_str("fid       n/a\n"),
        }
        s
    }
}

/// One generated sample paired with its reference.
pub struct EvalPair<'a> {
    pub id: String,
    pub video: &'a VideoTensor,
    pub foreground: &'a Array3<bool>,
    pub hands: &'a HandTrajectory,
    pub objects: &'a ObjectCloudSeq,
    pub ref_hands: &'a HandTrajectory,
    pub ref_objects: &'a ObjectCloudSeq,
}

/// Foreground where any channel differs from `background` by more than `threshold`.
pub fn masks_from_background(video: &VideoTensor, background: &Array3<f32>, threshold: f32) -> Result<Array3<bool>> {
    let (h, w, _) = background.dim();
    if h != video.height() || w != video.width() {
        return Err(Error::shape("background image size differs from video"));
    }
    Ok(Array3::from_shape_fn((video.len(), h, w), |(f, y, x)| {
        (0..3).any(|c| (video.frames[[f, y, x, c]] - background[[y, x, c]]).abs() > threshold)
    }))
}

pub fn evaluate(pairs: &[EvalPair], tau_op: f64, encoder: Option<&MotionAutoencoder>) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::shape("nothing to evaluate"));
    }
    let mut flags = Vec::new();
    let mut per_sample = Vec::with_capacity(pairs.len());
    let mut dynamic = 0usize;
    for p in pairs {
        let s = subject_consistency(p.video, p.foreground)?;
        let b = background_consistency(p.video, p.foreground)?;
        let t = temporal_smoothness(p.video)?;
        for f in s.flags.iter().chain(&b.flags).chain(&t.flags) {
            flags.push(format!("{}: {f}", p.id));
        }
        let dscore = dynamic_score(p.video)?;
        if dscore > tau_op {
            dynamic += 1;
        }
        per_sample.push(SampleMetrics {
            id: p.id.clone(),
            subj: s.value,
            bkg: b.value,
            tsmoo: t.value,
            dynamic_score: dscore,
            mpjpe: mpjpe(p.ref_hands, p.hands)?,
            msmoo: motion_smoothness(p.hands)?,
            chamfer: object_chamfer(p.ref_objects, p.objects)?,
        });
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let subj = mean(&|m| m.subj);
    let bkg = mean(&|m| m.bkg);
    let tsmoo = mean(&|m| m.tsmoo);
    let dyn_ = dynamic as f64 / n;
    let fid_value = match encoder {
        Some(enc) if pairs.len() >= 2 => {
            let real: Vec<Vec<f32>> = pairs.iter().map(|p| flatten_motion(p.ref_hands, p.ref_objects)).collect();
            let gen: Vec<Vec<f32>> = pairs.iter().map(|p| flatten_motion(p.hands, p.objects)).collect();
            let r = fid(&enc.encode(&real)?, &enc.encode(&gen)?)?;
            flags.extend(r.flags.iter().map(|f| format!("fid: {f}")));
            Some(r.value)
        }
        _ => None,
    };
    Ok(MetricsReport {
        subj,
        bkg,
        tsmoo,
        dyn_,
        overall: overall(subj, bkg, tsmoo, dyn_),
        mpjpe: mean(&|m| m.mpjpe),
        msmoo: mean(&|m| m.msmoo),
        chamfer: mean(&|m| m.chamfer),
        fid: fid_value,
        tau_op,
        flags,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn constant_video(n: usize, v: f32) -> VideoTensor {
        VideoTensor::new(Array4::from_elem((n, 16, 16, 3), v), 8.0).unwrap()
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_video_scores_one() {
        let v = constant_video(8, 0.4);
        let fg = Array3::from_elem((8, 16, 16), false);
        assert!((subject_consistency(&v, &fg).unwrap().value - 1.0).abs() < 1e-12);
        assert!((background_consistency(&v, &fg).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(temporal_smoothness(&v).unwrap().value, 1.0);
        assert_eq!(dynamic_score(&v).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_offset_arithmetic() {
        // Kept frames are 100/255; dropped frames sit 51 levels above their reconstruction.
        let mut fr = Array4::from_elem((6, 4, 4, 3), 100.0f32 / 255.0);
        for k in [0, 2, 4] {
            fr.index_axis_mut(ndarray::Axis(0), k).fill(151.0 / 255.0);
        }
        let v = VideoTensor::new(fr, 8.0).unwrap();
        assert!((temporal_smoothness(&v).unwrap().value - 0.8).abs() < 1e-6);
        assert!(temporal_smoothness(&constant_video(3, 0.1)).is_err());
        let odd = temporal_smoothness(&constant_video(5, 0.1)).unwrap();
        assert_eq!(odd.flags.len(), 1);
    }

    #[test]
    fn brightness_shift_does_not_move_blocks() {
        let a = ndarray::Array2::from_shape_fn((16, 16), |(y, x)| ((x * 7 + y * 3) % 11) as f64);
        let b = a.mapv(|v| v + 40.0);
        assert!(block_flow(&a, &b).iter().all(|(_, d)| *d == (0, 0)));
    }

    #[test]
    fn motion_metric_arithmetic() {
        let mut j = Array3::<f32>::zeros((5, 2, 3));
        let mut k = j.clone();
        for f in 0..5 {
            for q in 0..2 {
                k[[f, q, 0]] = 3.0;
                k[[f, q, 1]] = 4.0;
                j[[f, q, 0]] = (f * f) as f32 * 0.01;
            }
        }
        let (a, b) = (HandTrajectory::new(j.clone()).unwrap(), HandTrajectory::new(Array3::zeros((5, 2, 3))).unwrap());
        assert!((mpjpe(&b, &HandTrajectory::new(k).unwrap()).unwrap() - 5.0).abs() < 1e-9);
        assert!((motion_smoothness(&a).unwrap() - 0.02).abs() < 1e-6);
        assert_eq!(motion_smoothness(&b).unwrap(), 0.0);
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_self() {
        let a: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.3, (i % 2) as f64]).collect();
        let b: Vec<Vec<f64>> = (0..5).map(|i| vec![0.5 * i as f64, 1.0 - i as f64, 0.2 * i as f64]).collect();
        assert!(fid(&a, &a).unwrap().value < 1e-6);
        let (x, y) = (fid(&a, &b).unwrap().value, fid(&b, &a).unwrap().value);
        assert!((x - y).abs() < 1e-8 * x.max(1.0));
    }
}
