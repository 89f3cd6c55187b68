//! Noise schedule, forward diffusion and ancestral posterior sampling.
//!
//! Indexing: the tables are indexed by `t ∈ [0, T)`. Forward diffusion and
//! the networks take that table index. Posterior sampling is expressed in
//! diffusion *levels*: level `t ≥ 1` is table index `t − 1` and level 0 is the
//! clean sample, so `ᾱ_0 = 1` and the last step is deterministic.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of one reverse step `z_{t-1} = c_zt·z_t + c_x0·ẑ_0 + σ·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub c_zt: f64,
    pub c_x0: f64,
    pub variance: f64,
}

impl PosteriorCoefficients {
    pub fn from_tables(alpha_bar: f64, alpha_bar_prev: f64, alpha: f64) -> Self {
        let denom = 1.0 - alpha_bar;
        Self {
            c_zt: alpha.sqrt() * (1.0 - alpha_bar_prev) / denom,
            c_x0: alpha_bar_prev.sqrt() * (1.0 - alpha) / denom,
            variance: (1.0 - alpha_bar_prev) * (1.0 - alpha) / denom,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }

    /// Apply the step. With zero variance the noise tensor is not read.
    pub fn apply(&self, z_t: &Tensor, zhat0: &Tensor, noise: &Tensor) -> Result<Tensor> {
        check_same_shape(z_t, zhat0, "z_t", "zhat0")?;
        let mean = ((z_t * self.c_zt)? + (zhat0 * self.c_x0)?)?;
        if self.variance == 0.0 {
            return Ok(mean);
        }
        check_same_shape(z_t, noise, "z_t", "noise")?;
        Ok((mean + (noise * self.sigma())?)?)
    }
}

impl NoiseSchedule {
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if steps == 1 {
                    vec![beta_start]
                } else {
                    let span = beta_end - beta_start;
                    (0..steps)
                        .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |i: usize| {
                    let x = (i as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let mut prev = beta_start;
                (0..steps)
                    .map(|i| {
                        let b = (1.0 - f(i + 1) / f(i)).clamp(beta_start, beta_end).max(prev);
                        prev = b;
                        b
                    })
                    .collect()
            }
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::config(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))` for table index `t`.
    pub fn forward_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_index(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        check_same_shape(z0, eps, "z0", "eps")?;
        let (a, b) = self.forward_coefficients(t)?;
        Ok(((z0 * a)? + (eps * b)?)?)
    }

    /// Forward diffusion with one timestep per leading (batch) index.
    pub fn forward_diffuse_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        check_same_shape(z0, eps, "z0", "eps")?;
        let b = z0.dim(0)?;
        if ts.len() != b {
            return Err(Error::shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        let mut coeff_shape = vec![1usize; z0.rank()];
        coeff_shape[0] = b;
        let mut signal = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b);
        for &t in ts {
            let (a, s) = self.forward_coefficients(t)?;
            signal.push(a);
            noise.push(s);
        }
        let dt = z0.dtype();
        let dev = z0.device();
        let signal = Tensor::from_vec(signal, coeff_shape.as_slice(), dev)?.to_dtype(dt)?;
        let noise = Tensor::from_vec(noise, coeff_shape.as_slice(), dev)?.to_dtype(dt)?;
        Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
    }

    /// Reverse-step coefficients when leaving diffusion level `t` (1-based).
    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        if t == 0 {
            return Err(Error::config("posterior step from level 0 is undefined"));
        }
        if t > self.len() {
            return Err(Error::config(format!("level {t} exceeds schedule length {}", self.len())));
        }
        let ab = self.alpha_bars[t - 1];
        let ab_prev = if t >= 2 { self.alpha_bars[t - 2] } else { 1.0 };
        Ok(PosteriorCoefficients::from_tables(ab, ab_prev, self.alphas[t - 1]))
    }

    /// Draw `z_{t−1}` given `z_t` and the predicted clean sample.
    pub fn posterior_sample(&self, z_t: &Tensor, zhat0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.posterior_coefficients(t)?.apply(z_t, zhat0, noise)
    }
}

/// A strided subset of timesteps used for accelerated sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SubSchedule {
    parent: NoiseSchedule,
    step_indices: Vec<usize>,
}

impl SubSchedule {
    /// Evenly strided indices `round((i + 1)·T / S) − 1`, always ending at `T − 1`.
    pub fn new(parent: &NoiseSchedule, steps: usize) -> Result<Self> {
        let total = parent.len();
        if steps == 0 || steps > total {
            return Err(Error::config(format!("inference steps must lie in [1, {total}], got {steps}")));
        }
        let step_indices = (0..steps)
            .map(|i| {
                let num = (i as u128 + 1) * total as u128;
                let q = (num * 2 + steps as u128) / (2 * steps as u128);
                q as usize - 1
            })
            .collect();
        Ok(Self {
            parent: parent.clone(),
            step_indices,
        })
    }

    pub fn full(parent: &NoiseSchedule) -> Self {
        Self {
            parent: parent.clone(),
            step_indices: (0..parent.len()).collect(),
        }
    }

    pub fn parent(&self) -> &NoiseSchedule {
        &self.parent
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_indices
    }

    pub fn len(&self) -> usize {
        self.step_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_indices.is_empty()
    }

    pub fn effective_alpha_bars(&self) -> Vec<f64> {
        self.step_indices.iter().map(|&s| self.parent.alpha_bars[s]).collect()
    }

    /// Coefficients for reverse step `i` (from selected index `i` to `i − 1`,
    /// or to the clean sample when `i = 0`).
    pub fn step_coefficients(&self, i: usize) -> Result<PosteriorCoefficients> {
        let s = *self
            .step_indices
            .get(i)
            .ok_or_else(|| Error::config(format!("sub-schedule step {i} out of range")))?;
        let ab = self.parent.alpha_bars[s];
        let prev = if i == 0 { None } else { Some(self.step_indices[i - 1]) };
        let (ab_prev, alpha) = match prev {
            None if s == 0 => (1.0, self.parent.alphas[0]),
            None => (1.0, ab),
            Some(p) if s - p == 1 => (self.parent.alpha_bars[p], self.parent.alphas[s]),
            Some(p) => {
                let abp = self.parent.alpha_bars[p];
                (abp, ab / abp)
            }
        };
        Ok(PosteriorCoefficients::from_tables(ab, ab_prev, alpha))
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, na: &str, nb: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{na} {:?} vs {nb} {:?}", a.dims(), b.dims())));
    }
    Ok(())
}
