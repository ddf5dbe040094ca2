//! On-disk trajectory container.
//!
//! A dataset root holds `index.toml` and one directory per trajectory. Each
//! trajectory directory holds `manifest.toml` and, for every timestep `T` and
//! camera `C`, the tensor files `t{T}_c{C}.rgb` (`[H, W, 3]`) and
//! `t{T}_c{C}.depth` (`[H, W]`, meters, `inf` for no hit) in the `VPDT` format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpd_diff::checkpoint::{load_tensor, save_tensor};
use vpd_diff::Tensor;

use crate::error::{Error, IoContext, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::synth::{RgbdFrame, SceneSpec};

pub const FORMAT: &str = "vpt";
pub const VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera `[R | t]`, row-major.
    pub pose: Vec<f64>,
}

impl CameraEntry {
    pub fn from_camera(cam: &CameraModel) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            pose: cam.world_from_camera.to_3x4().to_vec(),
        }
    }

    pub fn to_camera(&self, width: usize, height: usize) -> Result<CameraModel> {
        let pose: [f64; 12] = self
            .pose
            .as_slice()
            .try_into()
            .map_err(|_| Error::data(format!("camera pose has {} entries, expected 12", self.pose.len())))?;
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, width, height, RigidTransform::from_3x4(&pose))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub timesteps: usize,
    pub dt: f64,
    pub split: Split,
    pub cameras: Vec<CameraEntry>,
    /// Generating scene, when the trajectory is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub trajectories: Vec<IndexEntry>,
}

/// Multi-view RGB-D video with poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub name: String,
    pub split: Split,
    pub dt: f64,
    pub cameras: Vec<CameraModel>,
    /// `frames[t][c]`.
    pub frames: Vec<Vec<RgbdFrame>>,
    pub scene: Option<SceneSpec>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.cameras.first().map_or((0, 0), |c| (c.width, c.height))
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.resolution();
        if self.frames.len() < 3 {
            return Err(Error::data(format!(
                "trajectory {} has {} frames, need at least 3",
                self.name,
                self.frames.len()
            )));
        }
        for (t, views) in self.frames.iter().enumerate() {
            if views.len() != self.cameras.len() {
                return Err(Error::data(format!("timestep {t} has {} views", views.len())));
            }
            for f in views {
                if f.width != w || f.height != h {
                    return Err(Error::data(format!("frame t{t}_c{} has a different resolution", f.camera)));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let (width, height) = self.resolution();
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            width,
            height,
            timesteps: self.frames.len(),
            dt: self.dt,
            split: self.split,
            cameras: self.cameras.iter().map(CameraEntry::from_camera).collect(),
            scene: self.scene.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).at(dir)?;
        let manifest = toml::to_string(&self.manifest()).map_err(|e| Error::data(e.to_string()))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).at(&mpath)?;
        for (t, views) in self.frames.iter().enumerate() {
            for (c, f) in views.iter().enumerate() {
                let rgb = Tensor::new(vec![f.height, f.width, 3], f.rgb.clone())?;
                let depth = Tensor::new(vec![f.height, f.width], f.depth.clone())?;
                let (rp, dp) = frame_paths(dir, t, c);
                save_tensor(&rp, &rgb).at(&rp)?;
                save_tensor(&dp, &depth).at(&dp)?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let cameras = manifest
            .cameras
            .iter()
            .map(|c| c.to_camera(manifest.width, manifest.height))
            .collect::<Result<Vec<_>>>()?;
        let mut frames = Vec::with_capacity(manifest.timesteps);
        for t in 0..manifest.timesteps {
            let mut views = Vec::with_capacity(cameras.len());
            for c in 0..cameras.len() {
                let (rp, dp) = frame_paths(dir, t, c);
                let rgb = load_tensor(&rp).at(&rp)?;
                let depth = load_tensor(&dp).at(&dp)?;
                let (w, h) = (manifest.width, manifest.height);
                if rgb.shape() != [h, w, 3] || depth.shape() != [h, w] {
                    return Err(Error::data(format!(
                        "{}: frame shape {:?}/{:?} does not match {w}x{h}",
                        rp.display(),
                        rgb.shape(),
                        depth.shape()
                    )));
                }
                views.push(RgbdFrame {
                    width: w,
                    height: h,
                    camera: c,
                    timestep: t,
                    rgb: rgb.into_data(),
                    depth: depth.into_data(),
                });
            }
            frames.push(views);
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let traj = Self {
            name,
            split: manifest.split,
            dt: manifest.dt,
            cameras,
            frames,
            scene: manifest.scene,
        };
        traj.validate()?;
        Ok(traj)
    }
}

fn frame_paths(dir: &Path, t: usize, c: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("t{t}_c{c}.rgb")), dir.join(format!("t{t}_c{c}.depth")))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported container {} v{} (expected {FORMAT} v{VERSION})",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

/// A dataset root directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let index: DatasetIndex =
            toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if index.format != FORMAT || index.version != VERSION {
            return Err(Error::data(format!("{}: unsupported dataset version", path.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn write_index(root: &Path, entries: Vec<IndexEntry>) -> Result<()> {
        fs::create_dir_all(root).at(root)?;
        let index = DatasetIndex {
            format: FORMAT.into(),
            version: VERSION,
            trajectories: entries,
        };
        let path = root.join(INDEX_FILE);
        let text = toml::to_string(&index).map_err(|e| Error::data(e.to_string()))?;
        fs::write(&path, text).at(&path)
    }

    pub fn names(&self, split: Split) -> Vec<&str> {
        self.index
            .trajectories
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn load(&self, name: &str) -> Result<Trajectory> {
        Trajectory::read(&self.root.join(name))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Trajectory>> {
        self.names(split).into_iter().map(|n| self.load(n)).collect()
    }
}
