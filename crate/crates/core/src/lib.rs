//! Learned particle-based simulation from posed multi-view RGB-D video.
//!
//! An encoder lifts RGB-D frames to a cloud of latent particles, a hierarchical
//! graph network advances the cloud in time, and a point-conditioned volumetric
//! renderer turns it back into images. Everything is trained from pixel error.

pub mod config;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod model;
pub mod particles;
pub mod renderer;
pub mod scenekit;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod vpt;

pub use error::{Error, ErrorKind, Result};
