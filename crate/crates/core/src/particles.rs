//! Latent particle clouds, both as plain data and as nodes on a tape.

use vpd_diff::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Workspace};

/// `N` particles with 3D positions and `F`-dimensional latent features.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<Point3>,
    /// `[N, F]`.
    pub features: Tensor<f32>,
    pub timestep: usize,
}

impl ParticleSet {
    pub fn new(positions: Vec<Point3>, features: Tensor<f32>, timestep: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != positions.len() {
            return Err(Error::invalid(format!(
                "{} positions but features of shape {:?}",
                positions.len(),
                features.shape()
            )));
        }
        Ok(Self {
            positions,
            features,
            timestep,
        })
    }

    pub fn empty(feature_dim: usize, timestep: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Tensor::zeros(&[0, feature_dim]),
            timestep,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn all_finite(&self) -> bool {
        self.features.all_finite() && self.positions.iter().flatten().all(|x| x.is_finite())
    }

    pub fn inside(&self, ws: &Workspace) -> bool {
        self.positions.iter().all(|p| ws.contains(p))
    }

    /// Keeps the particles at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            features: Tensor::new(vec![idx.len(), f], data).expect("selected shape"),
            timestep: self.timestep,
        }
    }

    /// Places the set on a tape as constants.
    pub fn to_vars<T: Real>(&self, g: &mut Graph<T>) -> ParticleVars {
        let pos: Vec<T> = self.positions.iter().flatten().map(|&x| T::lit(x)).collect();
        let pos = g.constant(Tensor::new(vec![self.len(), 3], pos).expect("positions shape"));
        let feat = g.constant(self.features.cast());
        ParticleVars {
            pos,
            feat,
            points: self.positions.clone(),
        }
    }
}

/// A particle cloud living on a tape; `points` mirrors the value of `pos`.
#[derive(Clone, Debug)]
pub struct ParticleVars {
    /// `[N, 3]`.
    pub pos: Var,
    /// `[N, F]`.
    pub feat: Var,
    pub points: Vec<Point3>,
}

impl ParticleVars {
    pub fn from_vars<T: Real>(g: &Graph<T>, pos: Var, feat: Var) -> Self {
        let points = points_of(g.value(pos));
        Self { pos, feat, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_set<T: Real>(&self, g: &Graph<T>, timestep: usize) -> ParticleSet {
        ParticleSet {
            positions: points_of(g.value(self.pos)),
            features: g.value(self.feat).cast(),
            timestep,
        }
    }
}

pub fn points_of<T: Real>(t: &Tensor<T>) -> Vec<Point3> {
    t.data()
        .chunks_exact(3)
        .map(|c| [c[0].to_f64_lossy(), c[1].to_f64_lossy(), c[2].to_f64_lossy()])
        .collect()
}
