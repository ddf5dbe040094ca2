//! A trained model: run configuration plus parameters, with the inference
//! entry points used by evaluation, editing and the command line.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpd_diff::checkpoint::{load_store, save_store};
use vpd_diff::ParameterStore;

use crate::config::RunConfig;
use crate::dynamics;
use crate::encoder::{self, View};
use crate::error::{Error, IoContext, Result};
use crate::geometry::CameraModel;
use crate::particles::ParticleSet;
use crate::renderer::{self, Image, Sampling};
use crate::seed;
use crate::vpt::Trajectory;

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.vpdc";
pub const STATE_FILE: &str = "state.toml";
pub const FORMAT: &str = "vpd-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Rays per tape when rendering whole images.
pub const RENDER_CHUNK: usize = 576;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
}

impl CheckpointHeader {
    pub fn current() -> Self {
        Self {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
        }
    }

    pub fn check(&self, dir: &Path) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::data(format!(
                "{}: not a checkpoint (format '{}')",
                dir.display(),
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "{}: incompatible checkpoint version {} (this build reads version {FORMAT_VERSION})",
                dir.display(),
                self.version
            )));
        }
        Ok(())
    }
}

/// Stable per-trajectory stream id, so subsampling depends only on the
/// trajectory and timestep.
pub fn trajectory_stream(name: &str) -> u64 {
    // FNV-1a.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Subsampling seed for encoding `traj` at timestep `t`.
pub fn encode_seed(traj: &Trajectory, t: usize) -> u64 {
    seed::derive(trajectory_stream(&traj.name), t as u64)
}

/// Encoder inputs for timestep `t`: the first `views` cameras.
pub fn views_at(traj: &Trajectory, t: usize, views: usize) -> Result<Vec<View<'_>>> {
    let frames = traj
        .frames
        .get(t)
        .ok_or_else(|| Error::invalid(format!("timestep {t} out of range for {}", traj.name)))?;
    let n = views.min(traj.cameras.len()).max(1);
    Ok((0..n)
        .map(|c| View {
            frame: &frames[c],
            camera: &traj.cameras[c],
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParameterStore<f32>,
}

impl Model {
    /// Fresh parameters for every module.
    pub fn init(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, 0));
        encoder::init_encoder(&mut params, &config.encoder, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, 1));
        dynamics::init_dynamics(&mut params, &config.dynamics, &mut rng)?;
        // An untrained model predicts a static scene.
        dynamics::zero_decoders(&mut params, &config.dynamics)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, 2));
        renderer::init_renderer(&mut params, &config.renderer, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Writes the config, parameters and a format header into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.config.to_toml()).at(&path)?;
        let path = dir.join(PARAMS_FILE);
        save_store(&path, &self.params).at(&path)?;
        write_header(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header = read_header(dir)?;
        header.check(dir)?;
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).at(&path)?;
        let config = RunConfig::from_toml(&text)?;
        let path = dir.join(PARAMS_FILE);
        let params = load_store(&path).at(&path)?;
        let model = Self { config, params };
        model.check_params()?;
        Ok(model)
    }

    /// Confirms every parameter the config needs is present with its shape.
    pub fn check_params(&self) -> Result<()> {
        let reference = Model::init(self.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let have = self
                .params
                .get(name)
                .map_err(|_| Error::data(format!("checkpoint lacks parameter `{name}`")))?;
            if have.shape() != t.shape() {
                return Err(Error::data(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self, traj: &Trajectory, t: usize) -> Result<ParticleSet> {
        let views = views_at(traj, t, self.config.train.views)?;
        encoder::encode_to_set(
            &self.params,
            &self.config.encoder,
            &views,
            &self.config.workspace,
            encode_seed(traj, t),
        )
    }

    /// Noise-free rollout of `steps` predicted timesteps.
    pub fn rollout(&self, p1: &ParticleSet, p2: &ParticleSet, steps: usize, seed: u64) -> Result<Vec<ParticleSet>> {
        dynamics::rollout(p1, p2, &self.params, &self.config.dynamics, steps, 0.0, seed)
    }

    pub fn render(&self, particles: &ParticleSet, camera: &CameraModel) -> Result<Image> {
        renderer::render_image(
            &self.params,
            &self.config.renderer,
            particles,
            camera,
            Some(&self.config.workspace),
            Sampling::Midpoint,
            RENDER_CHUNK,
        )
    }
}

pub fn write_header(dir: &Path) -> Result<()> {
    let path = dir.join(STATE_FILE);
    let text = toml::to_string(&CheckpointHeader::current()).expect("header serializes");
    std::fs::write(&path, text).at(&path)
}

/// Reads the `format` and `version` keys of the state file, ignoring others.
pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&path).at(&path)?;
    toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
