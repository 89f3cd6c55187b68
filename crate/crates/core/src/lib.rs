//! Joint video and 3D hand-object motion diffusion.
//!
//! One transformer denoises a video latent together with the latent of a
//! rendered motion video, while a vision-aware head denoises explicit hand
//! joints and object point clouds. The two are coupled in a closed loop: the
//! head's motion estimate is rendered back into guidance for the
//! transformer, and its loss is backpropagated through the transformer's
//! predictions.

pub mod backbone;
pub mod config;
pub mod error;
pub mod latent_codec;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod projection;
pub mod rng;
pub mod scheduler;
pub mod synth_data;
pub mod tensor_io;
pub mod trainer;
pub mod vid;
pub mod vocab;

pub use backbone::{BackboneConfig, Svimo, SvimoInputs};
pub use config::{FeedbackMode, RunConfig};
pub use error::{Error, Result};
pub use latent_codec::{token_budget, Codec, LatentVideo, ShapeConfig, TokenBudget, VideoTensor};
pub use motion::{HandTrajectory, ObjectCloudSeq, Skeleton};
pub use projection::{default_camera, project_point, render_motion_video, Aabb, CameraModel};
pub use scheduler::{NoiseSchedule, ScheduleKind, SubSchedule};
pub use trainer::{FitReport, Generation, PreparedSample, StepMetrics, TraceEntry, Trainer};
pub use vid::{Vid, VidConfig, VidShape};
pub use vocab::PromptVocab;
