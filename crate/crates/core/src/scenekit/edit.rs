//! Region-based edits of particle clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point3};
use crate::particles::ParticleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    Box { min: Point3, max: Point3 },
    Sphere { center: Point3, radius: f64 },
}

impl Selection {
    pub fn contains(&self, p: &Point3) -> bool {
        match self {
            Selection::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Selection::Sphere { center, radius } => dist2(p, center) <= radius * radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Delete,
    Translate { offset: [f64; 3] },
    /// Multiplies the latent features of selected particles.
    RecolorFeature { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edit {
    pub select: Selection,
    pub action: Action,
    /// Restrict to the cloud of this timestep; every cloud when absent.
    #[serde(default)]
    pub timestep: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditScript {
    #[serde(default)]
    pub edits: Vec<Edit>,
}

impl EditScript {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(format!("edit script: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("edit script serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (k, e) in self.edits.iter().enumerate() {
            let ok = match &e.select {
                Selection::Box { min, max } => (0..3).all(|a| min[a] <= max[a]),
                Selection::Sphere { radius, .. } => *radius >= 0.0,
            } && match &e.action {
                Action::Delete => true,
                Action::Translate { offset } => offset.iter().all(|x| x.is_finite()),
                Action::RecolorFeature { scale } => scale.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!("edit {k} is malformed")));
            }
        }
        Ok(())
    }
}

/// Applies `script` to `p` in order. Every selection is tested against the
/// positions `p` had before any edit. Returns the edited cloud and one
/// warning per edit that matched no particle.
pub fn apply_edits(p: &ParticleSet, script: &EditScript) -> Result<(ParticleSet, Vec<String>)> {
    script.validate()?;
    let mut out = p.clone();
    let mut alive = vec![true; p.len()];
    let mut warnings = Vec::new();
    let f = p.feature_dim();
    for (k, edit) in script.edits.iter().enumerate() {
        if edit.timestep.is_some_and(|t| t != p.timestep) {
            continue;
        }
        let chosen: Vec<usize> = (0..p.len())
            .filter(|&i| alive[i] && edit.select.contains(&p.positions[i]))
            .collect();
        if chosen.is_empty() {
            let msg = format!("edit {k} selects no particles at timestep {}", p.timestep);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        for &i in &chosen {
            match &edit.action {
                Action::Delete => alive[i] = false,
                Action::Translate { offset } => {
                    for a in 0..3 {
                        out.positions[i][a] += offset[a];
                    }
                }
                Action::RecolorFeature { scale } => {
                    let s = *scale as f32;
                    out.features.data_mut()[i * f..(i + 1) * f].iter_mut().for_each(|z| *z *= s);
                }
            }
        }
    }
    let keep: Vec<usize> = (0..p.len()).filter(|&i| alive[i]).collect();
    Ok((out.select(&keep), warnings))
}
