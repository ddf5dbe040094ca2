//! Synthetic ground truth: analytic rigid-body flight with floor bounces and
//! an exact ray tracer producing RGB-D frames.
//!
//! World frame is z-up; the floor is the square `|x|, |y| <= half_extent` at
//! `z = height`.

mod dataset;
mod raytrace;

pub use dataset::{generate_dataset, CameraRig, DatasetSpec, SceneTemplate, DATASET_PRESETS};
pub use raytrace::{render_analytic, render_frame, RgbdFrame};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// `size` is the radius.
    Sphere,
    /// Cube; `size` is the half edge length. Boxes spin about the vertical
    /// axis only, so their bottom face stays parallel to the floor.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub size: f64,
    pub color: Rgb,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    /// Rotation about the vertical axis, radians.
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FloorPattern {
    Solid,
    Checker { cell: f64, color: Rgb },
    /// Linear blend from the base color at -x to `color` at +x.
    Ramp { color: Rgb },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorSpec {
    pub height: f64,
    pub half_extent: f64,
    pub color: Rgb,
    pub pattern: FloorPattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    /// Direction towards the light.
    pub direction: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
    pub shadows: bool,
}

impl Default for LightSpec {
    fn default() -> Self {
        Self {
            direction: [0.4, -0.3, 1.0],
            ambient: 0.35,
            diffuse: 0.65,
            shadows: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub floor: FloorSpec,
    /// Magnitude of downward acceleration, m/s^2.
    pub gravity: f64,
    pub restitution: f64,
    pub dt: f64,
    pub background: Rgb,
    #[serde(default)]
    pub light: LightSpec,
}

/// Object pose at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub yaw: f64,
    pub yaw_rate: f64,
    pub resting: bool,
}

/// Object states per frame, plus the times of every floor contact.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub states: Vec<Vec<ObjectState>>,
    pub contacts: Vec<(usize, f64)>,
}

/// Rebound speeds below this are treated as coming to rest (m/s).
const REST_SPEED: f64 = 0.05;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(Error::invalid(format!("restitution {} outside [0, 1]", self.restitution)));
        }
        if !(self.gravity >= 0.0) {
            return Err(Error::invalid("gravity must be non-negative"));
        }
        if !(self.floor.half_extent > 0.0) {
            return Err(Error::invalid("floor half_extent must be positive"));
        }
        if let FloorPattern::Checker { cell, .. } = self.floor.pattern {
            if !(cell > 0.0) {
                return Err(Error::invalid("checker cell must be positive"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0) {
                return Err(Error::invalid(format!("object {i} size must be positive")));
            }
            if o.position[2] - o.size < self.floor.height - 1e-12 && self.over_floor(&o.position) {
                return Err(Error::invalid(format!(
                    "object {i} starts below the floor (bottom at {}, floor at {})",
                    o.position[2] - o.size,
                    self.floor.height
                )));
            }
        }
        Ok(())
    }

    fn over_floor(&self, p: &[f64; 3]) -> bool {
        p[0].abs() <= self.floor.half_extent && p[1].abs() <= self.floor.half_extent
    }
}

/// Advances one object by `dt` in closed form: ballistic arcs joined at exact
/// contact times, with the normal velocity scaled by `-restitution` at each
/// bounce. Contact times (relative to the start of the step) are appended to
/// `contacts`.
fn advance(spec: &SceneSpec, size: f64, s: &mut ObjectState, dt: f64, contacts: &mut Vec<f64>) {
    let g = spec.gravity;
    let rest_z = spec.floor.height + size;
    s.yaw += s.yaw_rate * dt;
    s.position[0] += s.velocity[0] * dt;
    s.position[1] += s.velocity[1] * dt;
    if s.resting {
        if spec.over_floor(&s.position) {
            return;
        }
        s.resting = false;
    }
    let mut left = dt;
    let mut elapsed = 0.0;
    // Bounded: each bounce either consumes time or brings the object to rest.
    for _ in 0..64 {
        let z0 = s.position[2];
        let vz = s.velocity[2];
        let gap = z0 - rest_z;
        // Solve z0 + vz t - g t^2 / 2 = rest_z for the first t > 0.
        let hit = if spec.over_floor(&s.position) && gap >= -1e-12 {
            first_contact(gap.max(0.0), vz, g)
        } else {
            None
        };
        match hit {
            Some(t) if t <= left => {
                elapsed += t;
                left -= t;
                s.position[2] = rest_z;
                let v_in = vz - g * t;
                contacts.push(elapsed);
                let v_out = -spec.restitution * v_in;
                if v_out < REST_SPEED {
                    s.velocity[2] = 0.0;
                    s.resting = true;
                    return;
                }
                s.velocity[2] = v_out;
            }
            _ => {
                s.position[2] = z0 + vz * left - 0.5 * g * left * left;
                s.velocity[2] = vz - g * left;
                return;
            }
        }
    }
}

/// Smallest `t > 0` with `gap + vz t - g t^2 / 2 = 0`, if the object is moving
/// towards (or will fall onto) the floor.
fn first_contact(gap: f64, vz: f64, g: f64) -> Option<f64> {
    if g == 0.0 {
        return (vz < 0.0).then(|| gap / -vz);
    }
    // g/2 t^2 - vz t - gap = 0, take the positive root.
    let disc = vz * vz + 2.0 * g * gap;
    let t = (vz + disc.sqrt()) / g;
    if gap == 0.0 && vz > 0.0 {
        // Leaving the floor: the root at t = 0 is the departure itself.
        return (t > 0.0).then_some(t);
    }
    (t >= 0.0).then_some(t)
}

/// Simulates `steps` frames (the initial state is frame 0).
pub fn simulate(spec: &SceneSpec, steps: usize) -> Result<Simulation> {
    spec.validate()?;
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let mut cur: Vec<ObjectState> = spec
        .objects
        .iter()
        .map(|o| ObjectState {
            position: o.position,
            velocity: o.velocity,
            yaw: o.yaw,
            yaw_rate: o.yaw_rate,
            resting: false,
        })
        .collect();
    let mut states = vec![cur.clone()];
    let mut contacts = Vec::new();
    for f in 1..steps {
        let t0 = (f - 1) as f64 * spec.dt;
        for (i, (s, o)) in cur.iter_mut().zip(&spec.objects).enumerate() {
            let mut local = Vec::new();
            advance(spec, o.size, s, spec.dt, &mut local);
            contacts.extend(local.into_iter().map(|t| (i, t0 + t)));
        }
        states.push(cur.clone());
    }
    Ok(Simulation { states, contacts })
}
