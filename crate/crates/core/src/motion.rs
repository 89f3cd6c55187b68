//! Explicit 3D motion: hand joint trajectories and object point clouds.

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint positions `[N, J, 3]` in scene units. With two hands the first
/// `J/2` joints are the left hand.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTrajectory {
    pub joints: Array3<f32>,
}

/// Object points `[N, K, 3]`; the first `K/2` points are the tool, the rest the target.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCloudSeq {
    pub points: Array3<f32>,
}

impl HandTrajectory {
    pub fn new(joints: Array3<f32>) -> Result<Self> {
        if joints.dim().2 != 3 {
            return Err(Error::shape(format!("hand joints need 3 coordinates, got {}", joints.dim().2)));
        }
        Ok(Self { joints })
    }

    pub fn frames(&self) -> usize {
        self.joints.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.joints.dim().1
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|v| v.is_finite())
    }
}

impl ObjectCloudSeq {
    pub fn new(points: Array3<f32>) -> Result<Self> {
        if points.dim().2 != 3 {
            return Err(Error::shape(format!("object points need 3 coordinates, got {}", points.dim().2)));
        }
        Ok(Self { points })
    }

    pub fn frames(&self) -> usize {
        self.points.dim().0
    }

    pub fn num_points(&self) -> usize {
        self.points.dim().1
    }

    pub fn tool_len(&self) -> usize {
        self.num_points() / 2
    }

    pub fn tool(&self) -> ArrayView3<'_, f32> {
        self.points.slice(s![.., ..self.tool_len(), ..])
    }

    pub fn target(&self) -> ArrayView3<'_, f32> {
        self.points.slice(s![.., self.tool_len().., ..])
    }

    /// Tool and target halves. Requires an even point count.
    pub fn split(&self) -> Result<(ArrayView3<'_, f32>, ArrayView3<'_, f32>)> {
        if self.num_points() % 2 != 0 {
            return Err(Error::shape(format!("object point count {} is odd", self.num_points())));
        }
        Ok((self.tool(), self.target()))
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|v| v.is_finite())
    }
}

pub fn array3_to_tensor(a: &Array3<f32>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let dims = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec(dims, data).map_err(|e| Error::shape(e.to_string()))
}

/// Kinematic topology of both hands: `parents[j]` is the parent joint of `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints_per_hand: usize,
    pub parents: Vec<Option<usize>>,
}

impl Skeleton {
    /// Wrist (0) → palm (1) → two-joint fingers rooted at the palm.
    pub fn bimanual(total_joints: usize) -> Result<Self> {
        if total_joints % 2 != 0 {
            return Err(Error::config(format!("bimanual skeleton needs an even joint count, got {total_joints}")));
        }
        let m = total_joints / 2;
        let mut parents = Vec::with_capacity(total_joints);
        for hand in 0..2 {
            let base = hand * m;
            for j in 0..m {
                let p = match j {
                    0 => None,
                    1 => Some(0),
                    _ if (j - 2) % 2 == 0 => Some(1),
                    _ => Some(j - 1),
                };
                parents.push(p.map(|p| p + base));
            }
        }
        Ok(Self {
            joints_per_hand: m,
            parents,
        })
    }

    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
    }

    pub fn is_left(&self, joint: usize) -> bool {
        joint < self.joints_per_hand
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeleton_is_a_forest_of_two_trees() {
        let s = Skeleton::bimanual(12).unwrap();
        assert_eq!(s.parents.iter().filter(|p| p.is_none()).count(), 2);
        for (p, c) in s.bones() {
            assert!(p < c);
            assert_eq!(s.is_left(p), s.is_left(c));
        }
        assert_eq!(s.bones().count(), 10);
        assert!(Skeleton::bimanual(5).is_err());
    }

    #[test]
    fn split_requires_even_count() {
        let o = ObjectCloudSeq::new(Array3::zeros((2, 3, 3))).unwrap();
        assert!(o.split().is_err());
        let o = ObjectCloudSeq::new(Array3::zeros((2, 4, 3))).unwrap();
        let (a, b) = o.split().unwrap();
        assert_eq!((a.dim().1, b.dim().1), (2, 2));
    }
}
