//! Procedural bimanual tool-use scenes: reference image, prompt, video,
//! hand joints and object clouds, all derived from one seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent_codec::VideoTensor;
use crate::motion::{HandTrajectory, ObjectCloudSeq, Skeleton};
use crate::projection::{self, default_camera, default_view, Aabb, CameraModel, Mat3};
use crate::rng::{streams, RngStream};
use crate::tensor_io::{self, HostTensor, TensorData};
use crate::vocab::PromptVocab;

pub const DATASET_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stir,
    Push,
    Lift,
    Rotate,
    Brush,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Stir, Action::Push, Action::Lift, Action::Rotate, Action::Brush];

    pub fn word(self) -> &'static str {
        match self {
            Action::Stir => "stir",
            Action::Push => "push",
            Action::Lift => "lift",
            Action::Rotate => "rotate",
            Action::Brush => "brush",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// Half extents.
    Box([f64; 3]),
    /// Radius and half length along local x.
    Cylinder(f64, f64),
    Sphere(f64),
}

const TOOLS: [(&str, Shape); 5] = [
    ("spoon", Shape::Cylinder(0.025, 0.15)),
    ("spatula", Shape::Box([0.14, 0.04, 0.01])),
    ("brush", Shape::Box([0.12, 0.025, 0.025])),
    ("stick", Shape::Cylinder(0.015, 0.17)),
    ("ball", Shape::Sphere(0.05)),
];

const TARGETS: [(&str, Shape); 5] = [
    ("bowl", Shape::Cylinder(0.16, 0.06)),
    ("plate", Shape::Cylinder(0.2, 0.015)),
    ("box", Shape::Box([0.12, 0.1, 0.1])),
    ("cup", Shape::Cylinder(0.06, 0.08)),
    ("orange", Shape::Sphere(0.1)),
];

const TEMPLATE_WORDS: [&str; 6] = ["left", "right", "hand", "uses", "the", "to"];

/// Vocabulary covering every prompt the generator can emit.
pub fn synth_vocab() -> PromptVocab {
    let words = TEMPLATE_WORDS
        .iter()
        .copied()
        .chain(TOOLS.iter().map(|t| t.0))
        .chain(Action::ALL.iter().map(|a| a.word()))
        .chain(TARGETS.iter().map(|t| t.0));
    PromptVocab::from_words(words)
}

pub fn prompt(side: Side, tool: &str, action: Action, target: &str) -> String {
    format!("{} hand uses the {tool} to {} the {target}", side.word(), action.word())
}

/// Scene volume (z up, table at z = 0) that every generated point stays inside.
pub fn scene_bounds() -> Aabb {
    Aabb {
        min: [-1.1, -0.7, -0.05],
        max: [1.1, 0.7, 1.0],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub joints: usize,
    pub points: usize,
    pub fps: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 9,
            height: 32,
            width: 48,
            joints: 12,
            points: 32,
            fps: 8.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.points % 2 != 0 {
            return Err(Error::config(format!("object point count {} must be even and positive", self.points)));
        }
        if self.joints < 4 || self.joints % 2 != 0 {
            return Err(Error::config(format!("joint count {} must be even and at least 4", self.joints)));
        }
        if self.frames < 2 || self.height < 4 || self.width < 4 {
            return Err(Error::config("need at least 2 frames and a 4×4 canvas"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::config("fps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub seed: u64,
    pub action: Action,
    pub side: Side,
    pub tool: String,
    pub target: String,
    pub grasp_frame: usize,
    pub fps: f32,
}

/// Mask labels; 0 is background.
pub mod labels {
    pub const TOOL: u8 = 1;
    pub const TARGET: u8 = 2;
    pub const LEFT_HAND: u8 = 3;
    pub const RIGHT_HAND: u8 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Array3<f32>,
    pub prompt: String,
    pub video: VideoTensor,
    /// Visible label per pixel `[N, H, W]`, see [`labels`].
    pub masks: Array3<u8>,
    pub hands: HandTrajectory,
    pub objects: ObjectCloudSeq,
    pub camera: CameraModel,
    pub meta: SampleMeta,
}

impl SampleRecord {
    /// Foreground masks as booleans.
    pub fn foreground(&self) -> ndarray::Array3<bool> {
        self.masks.mapv(|l| l != 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    r: Mat3,
    t: [f64; 3],
}

impl Pose {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = projection::mat_vec(&self.r, p);
        [q[0] + self.t[0], q[1] + self.t[1], q[2] + self.t[2]]
    }

    fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: projection::mat_mul(&self.r, &other.r),
            t: self.apply(other.t),
        }
    }

    fn inverse(&self) -> Pose {
        let rt = projection::transpose(&self.r);
        let t = projection::mat_vec(&rt, self.t);
        Pose {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn lerp3(a: [f64; 3], b: [f64; 3], f: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * f)
}

/// Catmull-Rom through `keys` at parameter `s ∈ [0, 1]`.
fn spline(keys: &[[f64; 3]], s: f64) -> [f64; 3] {
    let segs = keys.len() - 1;
    let x = s.clamp(0.0, 1.0) * segs as f64;
    let i = (x.floor() as usize).min(segs - 1);
    let u = x - i as f64;
    let p = |k: isize| keys[k.clamp(0, segs as isize) as usize];
    let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
    [0, 1, 2].map(|k| {
        0.5 * (2.0 * p1[k]
            + (p2[k] - p0[k]) * u
            + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * u * u
            + (3.0 * p1[k] - p0[k] - 3.0 * p2[k] + p3[k]) * u * u * u)
    })
}

fn sample_surface(shape: Shape, count: usize, rng: &mut RngStream) -> Vec<[f64; 3]> {
    (0..count)
        .map(|i| match shape {
            Shape::Sphere(r) => {
                // Fibonacci lattice: even coverage without clustering.
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                let phi = i as f64 * PI * (3.0 - 5f64.sqrt());
                let rho = (1.0 - z * z).sqrt();
                [r * rho * phi.cos(), r * rho * phi.sin(), r * z]
            }
            Shape::Cylinder(r, half) => {
                let a = 2.0 * PI * rng.uniform();
                [half * (2.0 * rng.uniform() - 1.0), r * a.cos(), r * a.sin()]
            }
            Shape::Box(h) => {
                let mut p = [0, 1, 2].map(|k| h[k] * (2.0 * rng.uniform() - 1.0));
                let face = rng.below(6);
                p[face / 2] = if face % 2 == 0 { h[face / 2] } else { -h[face / 2] };
                p
            }
        })
        .collect()
}

fn shape_floor(shape: Shape) -> f64 {
    match shape {
        Shape::Box(h) => h[2],
        Shape::Cylinder(r, _) => r,
        Shape::Sphere(r) => r,
    }
}

/// Joint offsets in the wrist frame (x forward, z up) for one hand.
fn hand_local(m: usize, curl: f64, mirror: f64) -> Vec<[f64; 3]> {
    let fingers = (m - 1) / 2;
    let mut out = vec![[0.0, 0.0, 0.0], [0.07, 0.0, 0.0]];
    for j in 2..m {
        let f = (j - 2) / 2;
        let spread = if fingers > 1 {
            mirror * (-0.035 + 0.07 * f as f64 / (fingers - 1) as f64)
        } else {
            0.0
        };
        let base = [0.11, spread, -0.005];
        if (j - 2) % 2 == 0 {
            out.push(base);
        } else {
            out.push([base[0] + 0.035 * curl.cos(), spread, base[2] - 0.035 * curl.sin()]);
        }
    }
    out
}

fn yaw(angle: f64) -> Mat3 {
    projection::axis_rotation(2, angle)
}

struct HandPath {
    poses: Vec<Pose>,
    curls: Vec<f64>,
}

/// Generate one sample; fully determined by `seed`.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = RngStream::new(seed, streams::DATA);
    let n = cfg.frames;
    let m = cfg.joints / 2;
    let half = cfg.points / 2;

    let side = if rng.below(2) == 0 { Side::Left } else { Side::Right };
    let action = Action::ALL[rng.below(Action::ALL.len())];
    let (tool_name, tool_shape) = TOOLS[rng.below(TOOLS.len())];
    let (target_name, target_shape) = TARGETS[rng.below(TARGETS.len())];
    let grasp = 1 + rng.below((n / 3).max(1));
    let sx = side.sign();

    let tool_local = sample_surface(tool_shape, half, &mut rng);
    let target_local = sample_surface(target_shape, half, &mut rng);
    let target_center = [
        0.25 * (2.0 * rng.uniform() - 1.0),
        0.1 + 0.15 * rng.uniform(),
        shape_floor(target_shape),
    ];
    let target_yaw = PI * rng.uniform();
    let tool_rest = Pose {
        r: yaw(0.5 * (2.0 * rng.uniform() - 1.0)),
        t: [sx * (0.45 + 0.1 * rng.uniform()), -0.25 + 0.1 * rng.uniform(), shape_floor(tool_shape)],
    };
    let grasp_point = [tool_rest.t[0], tool_rest.t[1], tool_rest.t[2] + 0.06];
    let start = [sx * 0.75, -0.4, 0.35];
    let phase = 2.0 * PI * rng.uniform();

    let c = target_center;
    let action_pos = |u: f64| -> [f64; 3] {
        match action {
            Action::Stir => {
                let a = 3.0 * PI * u + phase;
                [c[0] + 0.1 * a.cos(), c[1] + 0.1 * a.sin(), c[2] + 0.22]
            }
            Action::Push => [c[0] + sx * (0.35 - 0.3 * u), c[1], c[2] + 0.1],
            Action::Lift => [c[0] + sx * 0.25, c[1] - 0.1, c[2] + 0.15 + 0.35 * u],
            Action::Rotate => [c[0] + sx * 0.25, c[1], c[2] + 0.22],
            Action::Brush => [c[0] + 0.15 * (3.0 * PI * u).sin(), c[1] - 0.05, c[2] + 0.18],
        }
    };
    let base_yaw = if sx > 0.0 { PI } else { 0.0 };

    let grasp_path = {
        let mut poses = Vec::with_capacity(n);
        let mut curls = Vec::with_capacity(n);
        for f in 0..n {
            let (pos, extra_yaw, curl) = if f <= grasp {
                let s = smoothstep(f as f64 / grasp as f64);
                (lerp3(start, grasp_point, s), 0.0, 0.2 + 0.8 * s)
            } else {
                let u = (f - grasp) as f64 / (n - 1 - grasp).max(1) as f64;
                let w = smoothstep(2.0 * u);
                let spin = if action == Action::Rotate { 0.5 * PI * u } else { 0.0 };
                (lerp3(grasp_point, action_pos(u), w), spin, 1.0)
            };
            poses.push(Pose {
                r: yaw(base_yaw + extra_yaw),
                t: pos,
            });
            curls.push(curl);
        }
        HandPath { poses, curls }
    };

    let idle_path = {
        let keys: Vec<[f64; 3]> = (0..4)
            .map(|k| {
                let a = phase + k as f64;
                [-sx * (0.7 + 0.05 * a.cos()), -0.35 + 0.05 * a.sin(), 0.3 + 0.05 * (2.0 * a).sin()]
            })
            .collect();
        let poses = (0..n)
            .map(|f| Pose {
                r: yaw(if sx > 0.0 { 0.0 } else { PI }),
                t: spline(&keys, f as f64 / (n - 1) as f64),
            })
            .collect();
        let curls = (0..n).map(|f| 0.3 + 0.2 * (phase + f as f64 * 0.5).sin()).collect();
        HandPath { poses, curls }
    };

    let (left, right) = match side {
        Side::Left => (&grasp_path, &idle_path),
        Side::Right => (&idle_path, &grasp_path),
    };
    let mut joints = Array3::<f32>::zeros((n, cfg.joints, 3));
    for f in 0..n {
        for (hand, path, mirror) in [(0usize, left, -1.0), (1, right, 1.0)] {
            for (j, p) in hand_local(m, path.curls[f], mirror).into_iter().enumerate() {
                let q = path.poses[f].apply(p);
                for k in 0..3 {
                    joints[[f, hand * m + j, k]] = q[k] as f32;
                }
            }
        }
    }

    let weld = grasp_path.poses[grasp].inverse().compose(&tool_rest);
    let target_base = Pose {
        r: yaw(target_yaw),
        t: target_center,
    };
    let mut points = Array3::<f32>::zeros((n, cfg.points, 3));
    for f in 0..n {
        let tool_pose = if f < grasp {
            tool_rest
        } else {
            grasp_path.poses[f].compose(&weld)
        };
        let mut target_pose = target_base;
        if action == Action::Push && f > grasp {
            let u = (f - grasp) as f64 / (n - 1 - grasp).max(1) as f64;
            // The target slides once the tool reaches it.
            target_pose.t[0] -= sx * 0.2 * (u - 0.5).max(0.0);
        }
        for (i, p) in tool_local.iter().enumerate() {
            let q = tool_pose.apply(*p);
            for k in 0..3 {
                points[[f, i, k]] = q[k] as f32;
            }
        }
        for (i, p) in target_local.iter().enumerate() {
            let q = target_pose.apply(*p);
            for k in 0..3 {
                points[[f, half + i, k]] = q[k] as f32;
            }
        }
    }

    let hands = HandTrajectory::new(joints)?;
    let objects = ObjectCloudSeq::new(points)?;
    let camera = default_camera(&scene_bounds(), cfg.width, cfg.height, default_view())?;
    let skeleton = Skeleton::bimanual(cfg.joints)?;
    let (video, masks) = render_scene(&hands, &objects, &skeleton, &camera, cfg)?;
    let image = video.frame(0);
    Ok(SampleRecord {
        id: String::new(),
        image,
        prompt: prompt(side, tool_name, action, target_name),
        video,
        masks,
        hands,
        objects,
        camera,
        meta: SampleMeta {
            seed,
            action,
            side,
            tool: tool_name.to_string(),
            target: target_name.to_string(),
            grasp_frame: grasp,
            fps: cfg.fps,
        },
    })
}

const TOOL_SHADE: [f32; 3] = [0.85, 0.55, 0.2];
const TARGET_SHADE: [f32; 3] = [0.3, 0.45, 0.85];
const LEFT_SKIN: [f32; 3] = [0.95, 0.75, 0.6];
const RIGHT_SKIN: [f32; 3] = [0.8, 0.6, 0.45];

fn background(x: usize, y: usize, h: usize) -> [f32; 3] {
    let check = ((x / 4 + y / 4) % 2) as f32 * 0.06;
    let grad = 0.12 * y as f32 / h as f32;
    [0.3 + check + grad, 0.27 + check + grad, 0.22 + check + grad].map(quantize)
}

/// The static backdrop every synthetic frame is drawn over.
pub fn background_image(height: usize, width: usize) -> Array3<f32> {
    Array3::from_shape_fn((height, width, 3), |(y, x, c)| background(x, y, height)[c])
}

/// Photographic-style rendering: textured background, depth-shaded filled
/// disks for object points and thick shaded limbs for hands.
fn render_scene(
    hands: &HandTrajectory,
    objects: &ObjectCloudSeq,
    skeleton: &Skeleton,
    cam: &CameraModel,
    cfg: &SynthConfig,
) -> Result<(VideoTensor, Array3<u8>)> {
    let (n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut frames = Array4::<f32>::zeros((n, h, w, 3));
    let mut masks = Array3::<u8>::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let c = background(x, y, h);
            for f in 0..n {
                for k in 0..3 {
                    frames[[f, y, x, k]] = c[k];
                }
            }
        }
    }
    let radius = ((h as f64) / 32.0).round().max(1.0) as i64;
    let shade = |base: [f32; 3], depth: f64| -> [f32; 3] {
        let near = (1.0 - (depth + 1.5) / 3.0).clamp(0.0, 1.0) as f32;
        base.map(|c| quantize(c * (0.6 + 0.4 * near)))
    };
    let half = objects.num_points() / 2;
    let jh = skeleton.joints_per_hand;
    for f in 0..n {
        // (depth, u, v, color, label)
        let mut blobs: Vec<(f64, f64, f64, [f32; 3], u8)> = Vec::new();
        for k in 0..objects.num_points() {
            let p = [0, 1, 2].map(|c| objects.points[[f, k, c]] as f64);
            let (u, v, d) = cam.project(p);
            let (base, label) = if k < half {
                (TOOL_SHADE, labels::TOOL)
            } else {
                (TARGET_SHADE, labels::TARGET)
            };
            blobs.push((d, u, v, shade(base, d), label));
        }
        let joint = |j: usize| cam.project([0, 1, 2].map(|c| hands.joints[[f, j, c]] as f64));
        let hand_style = |j: usize| {
            if j < jh {
                (LEFT_SKIN, labels::LEFT_HAND)
            } else {
                (RIGHT_SKIN, labels::RIGHT_HAND)
            }
        };
        for j in 0..hands.num_joints() {
            let (u, v, d) = joint(j);
            let (base, label) = hand_style(j);
            blobs.push((d, u, v, shade(base, d), label));
        }
        for (p, c) in skeleton.bones() {
            let (a, b) = (joint(p), joint(c));
            let (base, label) = hand_style(c);
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).clamp(1, 4 * (h + w));
            for s in 1..steps {
                let t = s as f64 / steps as f64;
                let d = a.2 + (b.2 - a.2) * t;
                blobs.push((d, a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, shade(base, d), label));
            }
        }
        blobs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        for (_, u, v, color, label) in blobs {
            let (cx, cy) = (u.round() as i64, v.round() as i64);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (x, y) = (cx + dx, cy + dy);
                    if dx * dx + dy * dy > radius * radius || x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    for k in 0..3 {
                        frames[[f, y as usize, x as usize, k]] = color[k];
                    }
                    masks[[f, y as usize, x as usize]] = label;
                }
            }
        }
    }
    Ok((VideoTensor::new(frames, cfg.fps)?, masks))
}

/// Seed of sample `index` under a dataset master seed.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    let digest = Sha256::digest(format!("sample:{master}:{index}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn generate_dataset(master: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    (0..count)
        .map(|i| {
            let mut r = generate_sample(sample_seed(master, i), cfg)?;
            r.id = format!("s{i:04}");
            Ok(r)
        })
        .collect()
}

/// Deterministic shuffled split; the train side gets `round(ratio · n)` ids.
pub fn make_splits(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::config("cannot split an empty id list"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = RngStream::new(seed, "split");
    shuffled.shuffle(rng.inner());
    let n_train = ((ratio * ids.len() as f64).round() as usize).min(ids.len());
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub background: [f32; 3],
    pub tool: [f32; 3],
    pub target: [f32; 3],
    pub left_hand: [f32; 3],
    pub right_hand: [f32; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            background: projection::BACKGROUND,
            tool: projection::TOOL_COLOR,
            target: projection::TARGET_COLOR,
            left_hand: projection::LEFT_HAND_COLOR,
            right_hand: projection::RIGHT_HAND_COLOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub ids: Vec<String>,
    pub split: Split,
    pub vocab: Vec<String>,
    pub palette: Palette,
    pub skeleton: Skeleton,
    /// Relative path → sha256 hex of every data file.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSidecar {
    prompt: String,
    camera: CameraModel,
    meta: SampleMeta,
    joints: usize,
    points: usize,
    tool_points: usize,
    units: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn by_ids(&self, ids: &[String]) -> Vec<&SampleRecord> {
        ids.iter().filter_map(|id| self.records.iter().find(|r| &r.id == id)).collect()
    }

    pub fn train(&self) -> Vec<&SampleRecord> {
        self.by_ids(&self.manifest.split.train)
    }

    pub fn test(&self) -> Vec<&SampleRecord> {
        self.by_ids(&self.manifest.split.test)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn png_bytes(image: &Array3<f32>) -> Result<Vec<u8>> {
    let (h, w, _) = image.dim();
    let raw: Vec<u8> = image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::shape("image buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Array3<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::shape(e.to_string()))
}

/// Hands and objects as a two-entry tensor bundle.
pub fn motion_bundle(hands: &HandTrajectory, objects: &ObjectCloudSeq) -> Result<BTreeMap<String, HostTensor>> {
    let mut b = BTreeMap::new();
    let j = &hands.joints;
    let o = &objects.points;
    b.insert("hands".into(), HostTensor::f32(j.shape().to_vec(), j.iter().copied().collect())?);
    b.insert("objects".into(), HostTensor::f32(o.shape().to_vec(), o.iter().copied().collect())?);
    Ok(b)
}

/// Inverse of [`motion_bundle`]; `path` only labels errors.
pub fn motion_from_bundle(bundle: &BTreeMap<String, HostTensor>, path: &Path) -> Result<(HandTrajectory, ObjectCloudSeq)> {
    let get3 = |name: &str| -> Result<Array3<f32>> {
        let t = bundle.get(name).ok_or_else(|| Error::integrity(path, format!("missing {name}")))?;
        if t.shape.len() != 3 {
            return Err(Error::integrity(path, format!("{name} must have rank 3")));
        }
        Array3::from_shape_vec((t.shape[0], t.shape[1], t.shape[2]), t.as_f32()?.to_vec())
            .map_err(|e| Error::integrity(path, e.to_string()))
    };
    Ok((HandTrajectory::new(get3("hands")?)?, ObjectCloudSeq::new(get3("objects")?)?))
}

/// Write records under `root` with a manifest listing ids, the split and
/// content hashes. Each file is written atomically.
pub fn write_dataset(records: &[SampleRecord], cfg: &SynthConfig, split: Split, root: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(root)?;
    let mut files = BTreeMap::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        tensor_io::write_atomic(&path, &bytes)?;
        files.insert(rel, sha256_hex(&bytes));
        Ok(())
    };
    for r in records {
        for f in 0..r.video.len() {
            put(format!("{}/frames/{f:04}.png", r.id), png_bytes(&r.video.frame(f))?)?;
        }
        put(format!("{}/image.png", r.id), png_bytes(&r.image)?)?;
        put(format!("{}/motion.svt", r.id), tensor_io::encode_bundle(&motion_bundle(&r.hands, &r.objects)?))?;
        let masks = HostTensor::new(r.masks.shape().to_vec(), TensorData::U8(r.masks.iter().copied().collect()))?;
        put(format!("{}/masks.svt", r.id), masks.encode())?;
        let sidecar = SampleSidecar {
            prompt: r.prompt.clone(),
            camera: r.camera,
            meta: r.meta.clone(),
            joints: r.hands.num_joints(),
            points: r.objects.num_points(),
            tool_points: r.objects.tool_len(),
            units: "m".into(),
        };
        put(format!("{}/meta.json", r.id), serde_json::to_vec_pretty(&sidecar)?)?;
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT,
        config: *cfg,
        ids: records.iter().map(|r| r.id.clone()).collect(),
        split,
        vocab: synth_vocab().words().to_vec(),
        palette: Palette::default(),
        skeleton: Skeleton::bimanual(cfg.joints)?,
        files,
    };
    tensor_io::write_atomic(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = manifest_path(root);
    let bytes = std::fs::read(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&path, e.to_string()))?;
    if m.format_version != DATASET_FORMAT {
        return Err(Error::integrity(&path, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Read and hash-check a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let read = |rel: &str| -> Result<Vec<u8>> {
        let path = root.join(rel);
        let want = manifest
            .files
            .get(rel)
            .ok_or_else(|| Error::integrity(&path, "file not listed in manifest"))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::integrity(&path, format!("unreadable: {e}")))?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::integrity(&path, "content hash mismatch"));
        }
        Ok(bytes)
    };
    let cfg = manifest.config;
    let mut records = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let mut frames = Array4::<f32>::zeros((cfg.frames, cfg.height, cfg.width, 3));
        for f in 0..cfg.frames {
            let rel = format!("{id}/frames/{f:04}.png");
            let img = decode_png(&read(&rel)?)?;
            if img.dim() != (cfg.height, cfg.width, 3) {
                return Err(Error::integrity(root.join(&rel), "frame size disagrees with manifest"));
            }
            frames.index_axis_mut(ndarray::Axis(0), f).assign(&img);
        }
        let image = decode_png(&read(&format!("{id}/image.png"))?)?;
        let motion_rel = format!("{id}/motion.svt");
        let (hands, objects) =
            motion_from_bundle(&tensor_io::decode_bundle(&read(&motion_rel)?)?, &root.join(&motion_rel))?;
        let masks_t = HostTensor::decode(&read(&format!("{id}/masks.svt"))?)?;
        let masks = match &masks_t.data {
            TensorData::U8(v) => Array3::from_shape_vec((cfg.frames, cfg.height, cfg.width), v.clone())
                .map_err(|e| Error::integrity(root.join(format!("{id}/masks.svt")), e.to_string()))?,
            _ => return Err(Error::integrity(root.join(format!("{id}/masks.svt")), "masks must be u8")),
        };
        let sidecar: SampleSidecar = serde_json::from_slice(&read(&format!("{id}/meta.json"))?)?;
        records.push(SampleRecord {
            id: id.clone(),
            image,
            prompt: sidecar.prompt,
            video: VideoTensor::new(frames, sidecar.meta.fps)?,
            masks,
            hands,
            objects,
            camera: sidecar.camera,
            meta: sidecar.meta,
        });
    }
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_covers_every_combination() {
        let v = synth_vocab();
        assert!(v.len() <= 64);
        for side in [Side::Left, Side::Right] {
            for (tool, _) in TOOLS {
                for a in Action::ALL {
                    for (target, _) in TARGETS {
                        v.encode(&prompt(side, tool, a, target), 12).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn spline_hits_keys() {
        let keys = [[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, 1.0, 1.0]];
        assert_eq!(spline(&keys, 0.0), keys[0]);
        let mid = spline(&keys, 0.5);
        assert!((0..3).all(|k| (mid[k] - keys[1][k]).abs() < 1e-12));
        let end = spline(&keys, 1.0);
        assert!((0..3).all(|k| (end[k] - keys[2][k]).abs() < 1e-12));
    }

    #[test]
    fn pose_inverse_round_trips() {
        let p = Pose {
            r: projection::mat_mul(&yaw(0.7), &projection::axis_rotation(0, 0.3)),
            t: [0.1, -0.2, 0.3],
        };
        let q = p.inverse().apply(p.apply([0.4, 0.5, -0.6]));
        assert!((q[0] - 0.4).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12 && (q[2] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn odd_points_rejected() {
        let cfg = SynthConfig {
            points: 31,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_sample(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_exhaustive_and_seeded() {
        let ids: Vec<String> = (0..10).map(|i| format!("{i}")).collect();
        let (a, b) = make_splits(&ids, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert_eq!(make_splits(&ids, 0.5, 3).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<String> = a.iter().chain(&b).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
        assert!(make_splits(&[], 0.5, 0).is_err());
        assert!(make_splits(&ids, 1.0, 0).is_err());
    }
}
