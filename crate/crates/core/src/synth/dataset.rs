//! Randomized scenes, camera rigs and dataset generation.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_analytic, simulate, FloorPattern, FloorSpec, LightSpec, ObjectSpec, Rgb, SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::seed;
use crate::vpt::{Dataset, IndexEntry, Split, Trajectory};

/// Ranges from which each trajectory's single object is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTemplate {
    pub shape: Shape,
    pub size: [f64; 2],
    /// Initial `|x|, |y|` bound.
    pub spread: f64,
    pub height: [f64; 2],
    pub horizontal_speed: [f64; 2],
    pub vertical_speed: [f64; 2],
    pub yaw_rate: [f64; 2],
    pub colors: Vec<Rgb>,
    pub floor: FloorSpec,
    pub gravity: f64,
    pub restitution: f64,
    pub dt: f64,
    pub background: Rgb,
    pub light: LightSpec,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        Self {
            shape: Shape::Sphere,
            size: [0.16, 0.22],
            spread: 0.35,
            height: [0.45, 0.8],
            horizontal_speed: [0.2, 0.5],
            vertical_speed: [-0.5, 1.5],
            yaw_rate: [-3.0, 3.0],
            colors: vec![[0.85, 0.2, 0.15], [0.2, 0.4, 0.85], [0.9, 0.75, 0.15]],
            floor: FloorSpec {
                height: 0.0,
                half_extent: 1.0,
                color: [0.62, 0.6, 0.55],
                pattern: FloorPattern::Ramp {
                    color: [0.25, 0.45, 0.3],
                },
            },
            gravity: 9.8,
            restitution: 0.7,
            dt: 1.0 / 30.0,
            background: [0.12, 0.14, 0.2],
            light: LightSpec::default(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl SceneTemplate {
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        if self.colors.is_empty() {
            return Err(Error::invalid("scene template needs at least one color"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = uniform(&mut rng, self.size);
        let x = rng.random_range(-self.spread..=self.spread);
        let y = rng.random_range(-self.spread..=self.spread);
        let z = self.floor.height + size + uniform(&mut rng, self.height);
        let speed = uniform(&mut rng, self.horizontal_speed);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let vz = uniform(&mut rng, self.vertical_speed);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let yaw_rate = uniform(&mut rng, self.yaw_rate);
        let color = self.colors[rng.random_range(0..self.colors.len())];
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                shape: self.shape,
                size,
                color,
                position: [x, y, z],
                velocity: [speed * heading.cos(), speed * heading.sin(), vz],
                yaw: if self.shape == Shape::Box { yaw } else { 0.0 },
                yaw_rate: if self.shape == Shape::Box { yaw_rate } else { 0.0 },
            }],
            floor: self.floor.clone(),
            gravity: self.gravity,
            restitution: self.restitution,
            dt: self.dt,
            background: self.background,
            light: self.light.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Cameras on a ring around (and above) a target point, looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub distance: f64,
    /// Angle above the horizontal plane, radians.
    pub elevation: f64,
    pub azimuth_start: f64,
    /// Views are spread evenly from `azimuth_start` to `azimuth_start + azimuth_span`.
    pub azimuth_span: f64,
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub target: [f64; 3],
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            distance: 2.8,
            elevation: 0.6,
            azimuth_start: -0.5,
            azimuth_span: std::f64::consts::FRAC_PI_2,
            fov: 0.9,
            target: [0.0, 0.0, 0.15],
        }
    }
}

impl CameraRig {
    pub fn azimuths(&self, views: usize) -> Vec<f64> {
        if views <= 1 {
            return vec![self.azimuth_start];
        }
        (0..views)
            .map(|k| self.azimuth_start + self.azimuth_span * k as f64 / (views - 1) as f64)
            .collect()
    }

    pub fn camera_at(&self, azimuth: f64, width: usize, height: usize) -> Result<CameraModel> {
        let t = Vector3::from(self.target);
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        let eye = t + self.distance * Vector3::new(ce * azimuth.cos(), ce * azimuth.sin(), se);
        let pose = RigidTransform::look_at(eye, t, Vector3::z())?;
        CameraModel::with_fov(width, height, self.fov, pose)
    }

    pub fn cameras(&self, views: usize, width: usize, height: usize) -> Result<Vec<CameraModel>> {
        self.azimuths(views)
            .into_iter()
            .map(|a| self.camera_at(a, width, height))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Training trajectories.
    pub trajectories: usize,
    /// Additional held-out trajectories.
    pub heldout: usize,
    pub views: usize,
    pub steps: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub scene: SceneTemplate,
    pub rig: CameraRig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            trajectories: 16,
            heldout: 4,
            views: 2,
            steps: 40,
            width: 48,
            height: 48,
            seed: 0,
            scene: SceneTemplate::default(),
            rig: CameraRig::default(),
        }
    }
}

/// Named scene families for dataset generation.
pub const DATASET_PRESETS: [&str; 2] = ["spheres", "blocks"];

impl DatasetSpec {
    /// Default sizes with the named scene family.
    pub fn preset(name: &str) -> Result<Self> {
        let mut spec = Self::default();
        match name {
            "spheres" => {}
            "blocks" => {
                spec.scene.shape = Shape::Box;
                spec.scene.size = [0.12, 0.18];
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown dataset preset '{other}', expected one of {}",
                    DATASET_PRESETS.join(", ")
                )))
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::invalid("at least one view is required"));
        }
        if self.steps < 3 {
            return Err(Error::invalid("trajectories need at least 3 steps"));
        }
        if self.trajectories + self.heldout == 0 {
            return Err(Error::invalid("no trajectories requested"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        Ok(())
    }

    /// Builds trajectory `k` (training ones first, then held-out) in memory.
    pub fn trajectory(&self, k: usize) -> Result<Trajectory> {
        let scene = self.scene.sample(seed::derive(self.seed, k as u64))?;
        let sim = simulate(&scene, self.steps)?;
        let cameras = self.rig.cameras(self.views, self.width, self.height)?;
        let frames = render_analytic(&scene, &sim.states, &cameras);
        Ok(Trajectory {
            name: format!("traj_{k:04}"),
            split: if k < self.trajectories { Split::Train } else { Split::Heldout },
            dt: scene.dt,
            cameras,
            frames,
            scene: Some(scene),
        })
    }
}

/// Writes the dataset described by `spec` under `root`.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<Dataset> {
    spec.validate()?;
    let mut entries = Vec::new();
    for k in 0..spec.trajectories + spec.heldout {
        let traj = spec.trajectory(k)?;
        traj.write(&root.join(&traj.name))?;
        log::debug!("wrote {}", traj.name);
        entries.push(IndexEntry {
            name: traj.name,
            split: traj.split,
        });
    }
    Dataset::write_index(root, entries)?;
    Dataset::open(root)
}
