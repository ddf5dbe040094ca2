//! Cameras, rays, workspace cropping, subsampling and spatial indexing.

mod camera;
mod index;

pub use camera::{CameraModel, RigidTransform};
pub use index::SpatialIndex;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Ray with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Axis-aligned box within which particles are kept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub min: Point3,
    pub max: Point3,
}

impl Workspace {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        let ws = Self { min, max };
        ws.validate()?;
        Ok(ws)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|a| self.min[a] < self.max[a]) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "workspace min {:?} must be below max {:?}",
                self.min, self.max
            )))
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> Point3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    /// Parametric interval `[t0, t1]` where `ray` is inside the box.
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / ray.direction[a];
            let mut lo = (self.min[a] - ray.origin[a]) * inv;
            let mut hi = (self.max[a] - ray.origin[a]) * inv;
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            if lo.is_nan() || hi.is_nan() {
                // Ray parallel to the slab: inside iff origin is inside.
                if ray.origin[a] < self.min[a] || ray.origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Indices of the points inside `ws`, in their original order.
pub fn crop_to_workspace(points: &[Point3], ws: &Workspace) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| ws.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Chooses `n` distinct indices out of `0..len` uniformly at random, returned
/// in ascending order. When `len <= n` every index is kept.
pub fn subsample_uniform(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn to_point(v: &Vector3<f64>) -> Point3 {
    [v.x, v.y, v.z]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_keeps_inside_points_in_order() {
        let ws = Workspace::new([-1.0; 3], [1.0; 3]).unwrap();
        let pts = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, -1.0, 0.5], [0.5, 0.5, 1.01]];
        assert_eq!(crop_to_workspace(&pts, &ws), vec![0, 2]);
        let far = Workspace::new([5.0; 3], [6.0; 3]).unwrap();
        assert!(crop_to_workspace(&pts, &far).is_empty());
    }

    #[test]
    fn degenerate_workspace_is_rejected() {
        assert!(Workspace::new([0.0, 0.0, 0.0], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn subsample_is_seeded_and_distinct() {
        let a = subsample_uniform(1000, 64, 7);
        assert_eq!(a, subsample_uniform(1000, 64, 7));
        assert_ne!(a, subsample_uniform(1000, 64, 8));
        assert_eq!(a.len(), 64);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_uniform(10, 10, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(subsample_uniform(3, 10, 1), vec![0, 1, 2]);
    }

    #[test]
    fn subsample_is_roughly_uniform() {
        let mut hits = [0usize; 10];
        for seed in 0..2000 {
            for i in subsample_uniform(10, 3, seed) {
                hits[i] += 1;
            }
        }
        // Expected 600 per index.
        assert!(hits.iter().all(|&h| (480..720).contains(&h)), "{hits:?}");
    }

    #[test]
    fn ray_box_interval() {
        let ws = Workspace::new([-1.0; 3], [1.0; 3]).unwrap();
        let r = Ray::new(Vector3::new(-3.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        let (t0, t1) = ws.ray_interval(&r).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        let miss = Ray::new(Vector3::new(-3.0, 2.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        assert!(ws.ray_interval(&miss).is_none());
    }
}
