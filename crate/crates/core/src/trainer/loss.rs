//! Training objectives: the multi-step pixel loss, single-frame
//! reconstruction for autoencoder pretraining, and the feature-matching loss
//! of sequential dynamics training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpd_diff::{Graph, ParameterStore, Real, Tensor, Var};

use crate::config::RunConfig;
use crate::dynamics;
use crate::encoder::{self, Encoded};
use crate::error::{Error, Result};
use crate::geometry::{Point3, Ray};
use crate::model::{encode_seed, views_at};
use crate::particles::ParticleVars;
use crate::renderer::{point_features, render_rays, Sampling, Scene};
use crate::seed;
use crate::vpt::Trajectory;

/// A scalar loss on the tape plus its parts, for logging.
pub struct Loss {
    pub total: Var,
    /// Mean fine-pass color error over rendered timesteps.
    pub color: f64,
    pub coarse: f64,
    pub depth: f64,
}

/// Draws `n` (camera, pixel) pairs uniformly over all cameras and pixels,
/// returned in ray-index order so the loss reduction order is fixed.
pub fn sample_rays(traj: &Trajectory, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let per_cam = traj.cameras.first().map_or(0, |c| c.num_pixels());
    let total = per_cam * traj.cameras.len();
    if total == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..total)).collect();
    idx.sort_unstable();
    idx.into_iter().map(|k| (k / per_cam, k % per_cam)).collect()
}

/// Rays and ground-truth colors `[n, 3]` at timestep `t`.
pub fn ray_targets<T: Real>(traj: &Trajectory, t: usize, picks: &[(usize, usize)]) -> Result<(Vec<Ray>, Tensor<T>)> {
    let frames = traj
        .frames
        .get(t)
        .ok_or_else(|| Error::invalid(format!("timestep {t} out of range")))?;
    let mut rays = Vec::with_capacity(picks.len());
    let mut target = Vec::with_capacity(picks.len() * 3);
    for &(c, p) in picks {
        let cam = &traj.cameras[c];
        let (i, j) = (p % cam.width, p / cam.width);
        rays.push(cam.ray_through_pixel(i, j));
        target.extend(frames[c].pixel_rgb(i, j).map(|x| T::lit(x as f64)));
    }
    Ok((rays, Tensor::new(vec![picks.len(), 3], target)?))
}

/// Fine and coarse color MSE of `particles` rendered against timestep `t`.
#[allow(clippy::too_many_arguments)]
fn photometric<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    cfg: &RunConfig,
    particles: &ParticleVars,
    traj: &Trajectory,
    t: usize,
    seed: u64,
) -> Result<(Var, Var)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, 0));
    let picks = sample_rays(traj, cfg.train.rays_per_step, &mut rng);
    let (rays, target) = ray_targets::<T>(traj, t, &picks)?;
    let scene = Scene::new(particles);
    let out = render_rays(
        g,
        params,
        &cfg.renderer,
        &scene,
        &rays,
        Some(&cfg.workspace),
        Sampling::Stratified(seed::derive(seed, 1)),
    )?;
    let fine = g.mse(out.fine, &target)?;
    let coarse = g.mse(out.coarse, &target)?;
    Ok((fine, coarse))
}

fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    cfg: &RunConfig,
    traj: &Trajectory,
    t: usize,
) -> Result<Encoded> {
    let views = views_at(traj, t, cfg.train.views)?;
    encoder::encode_timestep(g, params, &cfg.encoder, &views, &cfg.workspace, encode_seed(traj, t))
}

/// Sum of `terms` scaled by `1 / terms.len()`.
fn average<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, T::lit(1.0 / terms.len() as f64)))
}

/// Combines color, coarse and depth terms with the configured weights.
fn combine<T: Real>(g: &mut Graph<T>, cfg: &RunConfig, fine: &[Var], coarse: &[Var], depth: &[Var]) -> Result<Loss> {
    let f = average(g, fine)?;
    let c = average(g, coarse)?;
    let value = |g: &Graph<T>, v: Var| g.value(v).item().to_f64_lossy();
    let (color, coarse_v) = (value(g, f), value(g, c));
    let cw = g.scale(c, T::lit(cfg.train.coarse_weight));
    let mut total = g.add(f, cw)?;
    let mut depth_v = 0.0;
    if !depth.is_empty() {
        let d = average(g, depth)?;
        depth_v = value(g, d);
        let dw = g.scale(d, T::lit(cfg.train.depth_weight));
        total = g.add(total, dw)?;
    }
    if !g.value(total).all_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(Loss {
        total,
        color,
        coarse: coarse_v,
        depth: depth_v,
    })
}

fn check_window(traj: &Trajectory, start: usize, needed: usize) -> Result<()> {
    if start + needed > traj.len() {
        return Err(Error::invalid(format!(
            "window at {start} needs {needed} timesteps but {} has {}",
            traj.name,
            traj.len()
        )));
    }
    Ok(())
}

/// Encodes timesteps `start` and `start + 1`, rolls out `T` steps with
/// training noise and averages the pixel error of every predicted step.
pub fn loss_vpd<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    cfg: &RunConfig,
    traj: &Trajectory,
    start: usize,
    seed: u64,
) -> Result<Loss> {
    let steps = cfg.train.rollout_steps;
    check_window(traj, start, steps + 2)?;
    let e1 = encode(g, params, cfg, traj, start)?;
    let e2 = encode(g, params, cfg, traj, start + 1)?;
    let depth: Vec<Var> = [e1.depth_loss, e2.depth_loss].into_iter().flatten().collect();
    let preds = dynamics::rollout_vars(
        g,
        params,
        &cfg.dynamics,
        e1.particles,
        e2.particles,
        steps,
        cfg.train.noise_sigma,
        seed::derive(seed, 0),
    )?;
    let mut fine = Vec::with_capacity(steps);
    let mut coarse = Vec::with_capacity(steps);
    for (k, p) in preds.iter().enumerate() {
        let s = seed::derive_all(seed, &[1, k as u64]);
        let (f, c) = photometric(g, params, cfg, p, traj, start + 2 + k, s)?;
        fine.push(f);
        coarse.push(c);
    }
    combine(g, cfg, &fine, &coarse, &depth)
}

/// Reconstruction of the encoded timestep itself.
pub fn loss_autoencoder<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    cfg: &RunConfig,
    traj: &Trajectory,
    t: usize,
    seed: u64,
) -> Result<Loss> {
    check_window(traj, t, 1)?;
    let e = encode(g, params, cfg, traj, t)?;
    let depth: Vec<Var> = e.depth_loss.into_iter().collect();
    let (f, c) = photometric(g, params, cfg, &e.particles, traj, t, seed)?;
    combine(g, cfg, &[f], &[c], &depth)
}

/// Uniform points in the workspace.
pub fn workspace_samples(cfg: &RunConfig, n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let ws = &cfg.workspace;
    (0..n)
        .map(|_| std::array::from_fn(|a| ws.min[a] + rng.random::<f64>() * (ws.max[a] - ws.min[a])))
        .collect()
}

/// Feature matching for dynamics trained against a frozen encoder: renderer
/// input features at random workspace points under the predicted cloud
/// versus under the encoding of the true next frames.
///
/// Only dynamics parameters receive gradients; encoder and renderer
/// parameters must be present.
pub fn loss_sequential<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    cfg: &RunConfig,
    traj: &Trajectory,
    start: usize,
    seed: u64,
) -> Result<Loss> {
    if !params.names().any(|n| n.starts_with(encoder::PREFIX)) {
        return Err(Error::invalid("sequential loss needs pretrained encoder parameters"));
    }
    let steps = cfg.train.rollout_steps;
    check_window(traj, start, steps + 2)?;
    g.freeze_prefix(encoder::PREFIX);
    g.freeze_prefix(crate::renderer::PREFIX);
    let frozen = |g: &mut Graph<T>, t: usize| -> Result<ParticleVars> {
        let e = encode(g, params, cfg, traj, t)?;
        let pos = g.detach(e.particles.pos);
        let feat = g.detach(e.particles.feat);
        Ok(ParticleVars::from_vars(g, pos, feat))
    };
    let p1 = frozen(g, start)?;
    let p2 = frozen(g, start + 1)?;
    let preds = dynamics::rollout_vars(g, params, &cfg.dynamics, p1, p2, steps, cfg.train.noise_sigma, seed::derive(seed, 0))?;
    let mut terms = Vec::with_capacity(steps);
    for (k, p) in preds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_all(seed, &[1, k as u64]));
        let pts = workspace_samples(cfg, cfg.train.sequential_samples, &mut rng);
        let target_cloud = frozen(g, start + 2 + k)?;
        let target = point_features(g, &cfg.renderer, &Scene::new(&target_cloud), &pts)?;
        let target = g.value(target).clone();
        let pred = point_features(g, &cfg.renderer, &Scene::new(p), &pts)?;
        terms.push(g.mse(pred, &target)?);
    }
    let total = average(g, &terms)?;
    let v = g.value(total).item().to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(Loss {
        total,
        color: v,
        coarse: 0.0,
        depth: 0.0,
    })
}
