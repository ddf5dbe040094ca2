//! Run configuration: every module's settings in one TOML document, with
//! named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsSpec;
use crate::encoder::EncoderSpec;
use crate::error::{Error, IoContext, Result};
use crate::geometry::Workspace;
use crate::renderer::RenderSpec;
use crate::trainer::TrainConfig;

pub const PRESETS: [&str; 4] = ["mujoco", "deformable", "kubric", "desk"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub workspace: Workspace,
    pub encoder: EncoderSpec,
    pub dynamics: DynamicsSpec,
    pub renderer: RenderSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "mujoco" => Self::tabletop(),
            "deformable" => Self::deformable(),
            "kubric" => Self::kubric(),
            "desk" => Self::desk(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}', expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rigid bodies on a table, seen from one camera.
    fn tabletop() -> Self {
        Self {
            workspace: Workspace {
                min: [-1.0; 3],
                max: [1.0; 3],
            },
            encoder: EncoderSpec::default(),
            dynamics: DynamicsSpec::default(),
            renderer: RenderSpec::default(),
            train: TrainConfig {
                views: 1,
                noise_sigma: 1e-5,
                ..TrainConfig::default()
            },
        }
    }

    /// Large deformable scenes, four cameras.
    fn deformable() -> Self {
        Self {
            workspace: Workspace {
                min: [-8.0, -8.0, -2.0],
                max: [8.0, 8.0, 8.0],
            },
            encoder: EncoderSpec::default(),
            dynamics: DynamicsSpec {
                r_s: 1.0,
                r_s_abstract: 3.0,
                location_scale: 0.5,
                ..DynamicsSpec::default()
            },
            renderer: RenderSpec {
                radii: vec![0.0, 0.5, 1.0, 4.0],
                bandwidths: vec![0.5, 0.5, 1.0, 4.0],
                near: 9.0,
                far: 30.0,
                ..RenderSpec::default()
            },
            train: TrainConfig {
                views: 4,
                noise_sigma: 1e-3,
                ..TrainConfig::default()
            },
        }
    }

    /// Multi-object scenes with nine cameras.
    fn kubric() -> Self {
        Self {
            workspace: Workspace {
                min: [-10.0; 3],
                max: [10.0; 3],
            },
            encoder: EncoderSpec::default(),
            dynamics: DynamicsSpec {
                r_s: 1.0,
                r_s_abstract: 3.0,
                location_scale: 0.5,
                ..DynamicsSpec::default()
            },
            renderer: RenderSpec {
                radii: vec![0.0, 0.1, 0.4, 2.0],
                bandwidths: vec![0.1, 0.2, 0.4, 2.0],
                near: 0.5,
                far: 15.0,
                ..RenderSpec::default()
            },
            train: TrainConfig {
                views: 9,
                noise_sigma: 1e-4,
                ..TrainConfig::default()
            },
        }
    }

    /// Small enough to train on a CPU in a few hours; matches the default
    /// synthetic dataset (48x48, two views, floor at z = 0).
    fn desk() -> Self {
        Self {
            workspace: Workspace {
                min: [-1.0, -1.0, -0.05],
                max: [1.0, 1.0, 1.4],
            },
            encoder: EncoderSpec {
                unet_channels: vec![16, 32, 32, 32, 16, 16],
                pool_levels: 2,
                feature_dim: 16,
                particle_budget: 1024,
                predict_depth: false,
                depth_prior: 2.5,
            },
            dynamics: DynamicsSpec {
                r_s: 0.25,
                r_s_abstract: 0.6,
                n_abstract: None,
                abstract_ratio: 8,
                message_steps: 4,
                latent: 32,
                mlp_layers: 2,
                decoder_layers: 2,
                location_scale: 0.1,
                feature_dim: 16,
            },
            renderer: RenderSpec {
                radii: vec![0.0, 0.05, 0.1, 0.3],
                bandwidths: vec![0.05, 0.05, 0.05, 0.3],
                knn: 16,
                n_coarse: 16,
                n_fine: 16,
                near: 0.5,
                far: 5.0,
                posenc_degree: 4,
                normalize_features: false,
                background: [0.12, 0.14, 0.2],
                trunk_layers: 4,
                trunk_width: 64,
                head_width: 32,
                skip_every: 3,
                feature_dim: 16,
                clip_to_workspace: true,
            },
            train: TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        self.encoder.validate()?;
        self.dynamics.validate()?;
        self.renderer.validate()?;
        self.train.validate()?;
        let f = self.encoder.feature_dim;
        if self.dynamics.feature_dim != f || self.renderer.feature_dim != f {
            return Err(Error::Config(format!(
                "feature widths disagree: encoder {f}, dynamics {}, renderer {}",
                self.dynamics.feature_dim, self.renderer.feature_dim
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads `source` as a preset name, or else as a TOML file path.
    pub fn load(source: &str) -> Result<Self> {
        if PRESETS.contains(&source) {
            return Self::preset(source);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text)
    }
}
