//! Run configuration: one TOML document, validated at load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::latent_codec::ShapeConfig;
use crate::metrics::AutoencoderConfig;
use crate::scheduler::ScheduleKind;
use crate::synth_data::SynthConfig;
use crate::vid::VidConfig;

pub const CONFIG_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Guidance from VID feeds the motion stream and VID's loss reaches SViMo.
    Full,
    /// Guidance only; VID sees detached predictions.
    GuidanceOnly,
    /// Zero guidance; VID's loss still reaches SViMo.
    GradientOnly,
    /// Neither: independent video and motion modelling.
    None,
}

impl FeedbackMode {
    pub fn uses_guidance(self) -> bool {
        matches!(self, FeedbackMode::Full | FeedbackMode::GuidanceOnly)
    }

    pub fn uses_gradient(self) -> bool {
        matches!(self, FeedbackMode::Full | FeedbackMode::GradientOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse steps used by generation.
    pub sample_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    /// Space/time-to-depth rearrangement; needs `rh·rw·rn·3` channels.
    #[default]
    Lossless,
    /// Per-cell linear autoencoder fitted to the training videos.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub codec: CodecKind,
    /// Optimizer steps used to fit a learned codec.
    pub codec_steps: usize,
    /// Codec latents are multiplied by this before diffusion and divided after.
    #[serde(default = "unit_scale")]
    pub latent_scale: f64,
    pub backbone: BackboneConfig,
    pub vid: VidConfig,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecKind::Lossless,
            codec_steps: 800,
            latent_scale: 1.0,
            backbone: BackboneConfig::default(),
            vid: VidConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_warmup_steps: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub feedback_mode: FeedbackMode,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 0.05,
            warmup_steps: 500,
            total_steps: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            lr_warmup_steps: 100,
            grad_clip: None,
            feedback_mode: FeedbackMode::Full,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub joints: usize,
    pub points: usize,
    pub fps: f32,
    /// Fraction of samples assigned to the training split.
    pub train_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            joints: 12,
            points: 32,
            fps: 8.0,
            train_ratio: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub tau_op: f64,
    /// Per-channel distance from the background that marks foreground.
    pub mask_threshold: f32,
    pub autoencoder: AutoencoderConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_op: 1.0,
            mask_threshold: 0.1,
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub shapes: ShapeConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            format_version: CONFIG_FORMAT,
            seed: 0,
            shapes: ShapeConfig::desk(),
            schedule: ScheduleConfig::default(),
            // Roughly the inverse spread of desk latents, which are raw pixels in [0, 1].
            model: ModelConfig {
                latent_scale: 8.0,
                ..ModelConfig::default()
            },
            // Calibrated so the 8-sample overfit converges within the step budget.
            train: TrainConfig {
                learning_rate: 5e-4,
                grad_clip: Some(1.0),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            shapes: ShapeConfig::full(),
            data: DataConfig {
                joints: 42,
                points: 298,
                ..DataConfig::default()
            },
            model: ModelConfig {
                codec: CodecKind::Learned,
                vid: VidConfig {
                    object_groups: 1,
                    ..VidConfig::default()
                },
                ..ModelConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            frames: self.shapes.frames,
            height: self.shapes.height,
            width: self.shapes.width,
            joints: self.data.joints,
            points: self.data.points,
            fps: self.data.fps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT {
            return Err(Error::config(format!(
                "format_version {} is not supported (expected {CONFIG_FORMAT})",
                self.format_version
            )));
        }
        self.shapes.validate()?;
        if self.model.codec == CodecKind::Lossless && self.shapes.latent_channels != self.shapes.lossless_channels() {
            return Err(Error::config(format!(
                "shapes.latent_channels is {} but the lossless codec produces {}",
                self.shapes.latent_channels,
                self.shapes.lossless_channels()
            )));
        }
        if !(self.model.latent_scale.is_finite() && self.model.latent_scale > 0.0) {
            return Err(Error::config("model.latent_scale must be positive and finite"));
        }
        self.model.backbone.validate()?;
        let v = &self.model.vid;
        if v.d_model == 0 || v.heads == 0 || v.d_model % v.heads != 0 || v.d_model % 2 != 0 {
            return Err(Error::config("model.vid.d_model must be even and divisible by heads"));
        }
        if v.object_groups == 0 || self.data.points % (2 * v.object_groups) != 0 {
            return Err(Error::config(format!(
                "data.points {} must split into 2 × {} equal groups",
                self.data.points, v.object_groups
            )));
        }
        self.synth().validate()?;
        let s = &self.schedule;
        if s.steps == 0 || !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::config("schedule needs steps > 0 and 0 < beta_start ≤ beta_end < 1"));
        }
        if s.sample_steps == 0 || s.sample_steps > s.steps {
            return Err(Error::config("schedule.sample_steps must lie in [1, schedule.steps]"));
        }
        let t = &self.train;
        if !(t.omega1 >= 0.0 && t.omega2 >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be finite and non-negative"));
        }
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(Error::config("data.train_ratio must lie in (0, 1)"));
        }
        if self.data.samples == 0 {
            return Err(Error::config("data.samples must be positive"));
        }
        if !(self.metrics.tau_op >= 0.0) {
            return Err(Error::config("metrics.tau_op must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Replace the seed with a decimal environment value when present.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("SVIMO_SEED `{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Apply `a.b.c=value`; the value is parsed as TOML, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key `{path}` is malformed")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{path}`: `{k}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
