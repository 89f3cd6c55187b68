//! Orthographic projection and the rendered motion video.
//!
//! Palette (RGB in `[0, 1]`): background black, tool orange, target azure,
//! left hand green, right hand magenta.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_codec::VideoTensor;
use crate::motion::{HandTrajectory, ObjectCloudSeq, Skeleton};

pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];
pub const TOOL_COLOR: [f32; 3] = [1.0, 0.5, 0.0];
pub const TARGET_COLOR: [f32; 3] = [0.0, 0.6, 1.0];
pub const LEFT_HAND_COLOR: [f32; 3] = [0.2, 1.0, 0.2];
pub const RIGHT_HAND_COLOR: [f32; 3] = [1.0, 0.2, 0.8];

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraKind {
    Orthographic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub kind: CameraKind,
    /// Pixels per scene unit.
    pub scale: f64,
    /// Pixel position `(u0, v0)` of the view-frame origin.
    pub center: [f64; 2],
    /// World → view rotation; rows are the view axes.
    pub rotation: Mat3,
}

/// Axis-aligned box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for k in 0..3 {
                c[k] = if i >> k & 1 == 1 { self.max[k] } else { self.min[k] };
            }
        }
        out
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }
}

pub fn mat_vec(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[c][r];
        }
    }
    out
}

/// Rotation by `angle` radians about a coordinate axis (0 = x, 1 = y, 2 = z).
pub fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Front view of a z-up scene tilted to look down onto the table.
pub fn default_view() -> Mat3 {
    let front: Mat3 = [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
    mat_mul(&axis_rotation(0, -0.6), &front)
}

impl CameraModel {
    pub fn orthographic(scale: f64, center: [f64; 2], rotation: Mat3) -> Result<Self> {
        let cam = Self {
            kind: CameraKind::Orthographic,
            scale,
            center,
            rotation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("camera scale must be positive, got {}", self.scale)));
        }
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                if (rrt[r][c] - want).abs() > 1e-9 {
                    return Err(Error::config("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// `(u, v, depth)`; larger depth is farther from the viewer.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let q = mat_vec(&self.rotation, p);
        (
            self.center[0] + self.scale * q[0],
            self.center[1] + self.scale * q[1],
            q[2],
        )
    }
}

pub fn project_point(p: [f64; 3], cam: &CameraModel) -> (f64, f64, f64) {
    cam.project(p)
}

/// Camera centered on `bounds` so the box projects into the central 80% of the canvas.
pub fn default_camera(bounds: &Aabb, width: usize, height: usize, rotation: Mat3) -> Result<CameraModel> {
    if (0..3).any(|k| !(bounds.max[k] >= bounds.min[k])) {
        return Err(Error::config("scene bounds are empty"));
    }
    if width == 0 || height == 0 {
        return Err(Error::config("canvas must be non-empty"));
    }
    let corners = bounds.corners().map(|c| mat_vec(&rotation, c));
    let lo = [0, 1].map(|k| corners.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1].map(|k| corners.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max));
    let ext = [0, 1].map(|k| (hi[k] - lo[k]).max(1e-3));
    let scale = 0.8 * (width as f64 / ext[0]).min(height as f64 / ext[1]);
    let mid = [0, 1].map(|k| 0.5 * (lo[k] + hi[k]));
    let center = [
        0.5 * (width as f64 - 1.0) - scale * mid[0],
        0.5 * (height as f64 - 1.0) - scale * mid[1],
    ];
    CameraModel::orthographic(scale, center, rotation)
}

enum Primitive {
    Dot { u: f64, v: f64, color: [f32; 3] },
    Disk { u: f64, v: f64, radius: i64, color: [f32; 3] },
    Segment { a: (f64, f64), b: (f64, f64), color: [f32; 3] },
}

struct Canvas<'a> {
    frames: &'a mut Array4<f32>,
    n: usize,
    h: usize,
    w: usize,
}

impl Canvas<'_> {
    fn put(&mut self, x: i64, y: i64, color: [f32; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        for (k, c) in color.iter().enumerate() {
            self.frames[[self.n, y as usize, x as usize, k]] = *c;
        }
    }

    fn draw(&mut self, p: &Primitive) {
        match *p {
            Primitive::Dot { u, v, color } => self.put(u.round() as i64, v.round() as i64, color),
            Primitive::Disk { u, v, radius, color } => {
                let (cx, cy) = (u.round() as i64, v.round() as i64);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        if dx * dx + dy * dy <= radius * radius {
                            self.put(cx + dx, cy + dy, color);
                        }
                    }
                }
            }
            Primitive::Segment { a, b, color } => {
                let cap = (4 * (self.w + self.h)) as f64;
                let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().min(cap) as usize;
                for i in 0..=steps {
                    let f = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
                    let x = a.0 + (b.0 - a.0) * f;
                    let y = a.1 + (b.1 - a.1) * f;
                    self.put(x.round() as i64, y.round() as i64, color);
                }
            }
        }
    }
}

fn finite3(p: [f64; 3]) -> bool {
    p.iter().all(|v| v.is_finite())
}

/// Render hands and objects as a dot-and-skeleton video on a black background.
///
/// Object points are single pixels, joints are disks of radius
/// `max(1, H/64)` and bones are one-pixel segments. Primitives are painted
/// far to near.
pub fn render_motion_video(
    hands: &HandTrajectory,
    objects: &ObjectCloudSeq,
    skeleton: Option<&Skeleton>,
    cam: &CameraModel,
    height: usize,
    width: usize,
) -> Result<VideoTensor> {
    cam.validate()?;
    let n = hands.frames().max(objects.frames());
    if hands.num_joints() > 0 && objects.num_points() > 0 && hands.frames() != objects.frames() {
        return Err(Error::shape(format!(
            "hands have {} frames, objects {}",
            hands.frames(),
            objects.frames()
        )));
    }
    let joints = hands.num_joints();
    if let Some(sk) = skeleton {
        if sk.parents.len() != joints {
            return Err(Error::shape(format!("skeleton has {} joints, motion {joints}", sk.parents.len())));
        }
    }
    let radius = ((height / 64).max(1)) as i64;
    let mut frames = Array4::<f32>::zeros((n, height, width, 3));
    for (k, c) in BACKGROUND.iter().enumerate() {
        frames.slice_mut(ndarray::s![.., .., .., k]).fill(*c);
    }
    let half = joints / 2;
    let tool_len = objects.num_points() / 2;
    for f in 0..n {
        let mut prims: Vec<(f64, Primitive)> = Vec::new();
        if objects.num_points() > 0 {
            for k in 0..objects.num_points() {
                let p = [0, 1, 2].map(|c| objects.points[[f, k, c]] as f64);
                if !finite3(p) {
                    continue;
                }
                let (u, v, d) = cam.project(p);
                let color = if k < tool_len { TOOL_COLOR } else { TARGET_COLOR };
                prims.push((d, Primitive::Dot { u, v, color }));
            }
        }
        if joints > 0 {
            let proj: Vec<Option<(f64, f64, f64)>> = (0..joints)
                .map(|j| {
                    let p = [0, 1, 2].map(|c| hands.joints[[f, j, c]] as f64);
                    finite3(p).then(|| cam.project(p))
                })
                .collect();
            let color_of = |j: usize| if joints >= 2 && j >= half { RIGHT_HAND_COLOR } else { LEFT_HAND_COLOR };
            if let Some(sk) = skeleton {
                for (p, c) in sk.bones() {
                    if let (Some(a), Some(b)) = (proj[p], proj[c]) {
                        prims.push((
                            0.5 * (a.2 + b.2),
                            Primitive::Segment {
                                a: (a.0, a.1),
                                b: (b.0, b.1),
                                color: color_of(c),
                            },
                        ));
                    }
                }
            }
            for (j, pj) in proj.iter().enumerate() {
                if let Some((u, v, d)) = *pj {
                    prims.push((d, Primitive::Disk { u, v, radius, color: color_of(j) }));
                }
            }
        }
        // Stable sort keeps insertion order among equal depths.
        prims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut canvas = Canvas {
            frames: &mut frames,
            n: f,
            h: height,
            w: width,
        };
        for (_, p) in &prims {
            canvas.draw(p);
        }
    }
    VideoTensor::new(frames, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cam() -> CameraModel {
        CameraModel::orthographic(10.0, [32.0, 24.0], IDENTITY).unwrap()
    }

    #[test]
    fn projects_with_linear_arithmetic() {
        let (u, v, d) = project_point([0.5, -0.2, 1.0], &cam());
        assert!((u - 37.0).abs() < 1e-12 && (v - 22.0).abs() < 1e-12 && d == 1.0);
        assert_eq!(project_point([0.0, 0.0, 3.0], &cam()), (32.0, 24.0, 3.0));
    }

    #[test]
    fn frame_invariance_under_joint_rotation() {
        let r = mat_mul(&axis_rotation(0, 0.3), &axis_rotation(2, -1.1));
        let p = [0.3, -0.7, 0.2];
        let base = CameraModel::orthographic(7.0, [5.0, 6.0], default_view()).unwrap();
        let rotated_cam = CameraModel::orthographic(7.0, [5.0, 6.0], mat_mul(&default_view(), &transpose(&r))).unwrap();
        let a = base.project(p);
        let b = rotated_cam.project(mat_vec(&r, p));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_camera() {
        assert!(CameraModel::orthographic(0.0, [0.0, 0.0], IDENTITY).is_err());
        let bad = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::orthographic(1.0, [0.0, 0.0], bad).is_err());
    }

    #[test]
    fn default_camera_scale_rules() {
        let unit = Aabb { min: [0.0; 3], max: [1.0; 3] };
        let c = default_camera(&unit, 96, 64, IDENTITY).unwrap();
        assert!(c.scale <= 0.8 * 64.0 + 1e-9);
        let shifted = Aabb { min: [2.0; 3], max: [3.0; 3] };
        let c2 = default_camera(&shifted, 96, 64, IDENTITY).unwrap();
        assert_eq!(c.scale, c2.scale);
        assert!((c2.center[0] - (c.center[0] - 2.0 * c.scale)).abs() < 1e-9);
        let big = Aabb { min: [0.0; 3], max: [2.0; 3] };
        let c3 = default_camera(&big, 96, 64, IDENTITY).unwrap();
        assert!((c3.scale - c.scale / 2.0).abs() < 1e-12);
        let flat = Aabb { min: [0.0; 3], max: [0.0; 3] };
        let c4 = default_camera(&flat, 96, 64, IDENTITY).unwrap();
        assert!(c4.scale.is_finite());
        for corner in unit.corners() {
            let (u, v, _) = c.project(corner);
            assert!((0.0..=95.0).contains(&u));
            assert!((v - 31.5).abs() <= 0.4 * 64.0 + 1e-9);
        }
    }

    #[test]
    fn empty_motion_renders_background() {
        let h = HandTrajectory::new(Array3::zeros((3, 0, 3))).unwrap();
        let o = ObjectCloudSeq::new(Array3::zeros((3, 0, 3))).unwrap();
        let v = render_motion_video(&h, &o, None, &cam(), 48, 64).unwrap();
        assert_eq!(v.frames.dim(), (3, 48, 64, 3));
        assert!(v.frames.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn static_point_is_one_pixel_per_frame() {
        let h = HandTrajectory::new(Array3::zeros((4, 0, 3))).unwrap();
        let mut pts = Array3::zeros((4, 1, 3));
        for f in 0..4 {
            pts[[f, 0, 0]] = 0.5;
            pts[[f, 0, 1]] = -0.2;
            pts[[f, 0, 2]] = 1.0;
        }
        let o = ObjectCloudSeq::new(pts).unwrap();
        let v = render_motion_video(&h, &o, None, &cam(), 48, 64).unwrap();
        for f in 0..4 {
            let lit: Vec<(usize, usize)> = (0..48)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|&(y, x)| (0..3).any(|k| v.frames[[f, y, x, k]] != 0.0))
                .collect();
            assert_eq!(lit, vec![(22, 37)]);
            assert_eq!(v.frame(f), v.frame(0));
        }
    }

    #[test]
    fn palette_is_pairwise_distinct() {
        let p = [BACKGROUND, TOOL_COLOR, TARGET_COLOR, LEFT_HAND_COLOR, RIGHT_HAND_COLOR];
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert_ne!(p[i], p[j]);
            }
        }
    }

    #[test]
    fn nearer_primitive_overdraws() {
        let h = HandTrajectory::new(Array3::zeros((1, 0, 3))).unwrap();
        let mut pts = Array3::zeros((1, 2, 3));
        pts[[0, 0, 2]] = 1.0; // tool, nearer
        pts[[0, 1, 2]] = 5.0; // target, farther, same pixel
        let o = ObjectCloudSeq::new(pts).unwrap();
        let v = render_motion_video(&h, &o, None, &cam(), 48, 64).unwrap();
        let px: Vec<f32> = (0..3).map(|k| v.frames[[0, 24, 32, k]]).collect();
        assert_eq!(px, TOOL_COLOR.to_vec());
    }
}
