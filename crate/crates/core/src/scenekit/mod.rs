//! Working with trained models: rollout evaluation against ground truth,
//! particle edits, novel views, image export and the particle-count sweep.

mod edit;
mod metrics;

use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::model::Model;
use crate::particles::ParticleSet;
use crate::renderer::Image;
use crate::vpt::Trajectory;

pub use edit::{apply_edits, Action, Edit, EditScript, Selection};
pub use metrics::{mse, psnr, ssim, ssim_with, SsimParams, PSNR_CAP};

/// Per-step scores of a rollout, averaged over trajectories and cameras.
/// Index `k` holds predicted step `k + 1`, i.e. frame `k + 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub horizon: usize,
    pub trajectories: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Scores of repeating the last conditioning frame.
    pub baseline_psnr: Vec<f64>,
    pub baseline_ssim: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn mean_baseline_psnr(&self) -> f64 {
        mean(&self.baseline_psnr)
    }

    pub fn mean_baseline_ssim(&self) -> f64 {
        mean(&self.baseline_ssim)
    }

    /// `step,psnr,ssim,baseline_psnr,baseline_ssim` rows plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,psnr,ssim,baseline_psnr,baseline_ssim\n");
        for k in 0..self.horizon {
            s += &format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                k + 1,
                self.psnr[k],
                self.ssim[k],
                self.baseline_psnr[k],
                self.baseline_ssim[k]
            );
        }
        s += &format!(
            "mean,{:.4},{:.4},{:.4},{:.4}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_baseline_psnr(),
            self.mean_baseline_ssim()
        );
        s
    }
}

/// Encodes the first two frames of `traj`, applies `edits` to both clouds
/// and predicts `horizon` further timesteps.
pub fn rollout_trajectory(
    model: &Model,
    traj: &Trajectory,
    horizon: usize,
    edits: Option<&EditScript>,
) -> Result<Vec<ParticleSet>> {
    if horizon + 2 > traj.len() {
        return Err(Error::invalid(format!(
            "horizon {horizon} needs {} frames, {} has {}",
            horizon + 2,
            traj.name,
            traj.len()
        )));
    }
    let mut p1 = model.encode(traj, 0)?;
    let mut p2 = model.encode(traj, 1)?;
    if let Some(script) = edits {
        p1 = apply_edits(&p1, script)?.0;
        p2 = apply_edits(&p2, script)?.0;
    }
    model.rollout(&p1, &p2, horizon, 0)
}

/// Rolls out every trajectory and scores each predicted frame from every
/// camera of the trajectory.
pub fn evaluate_rollout(model: &Model, trajs: &[Trajectory], horizon: usize) -> Result<EvalReport> {
    evaluate_with_frames(model, trajs, horizon, |_, _, _| Ok(()))
}

/// As [`evaluate_rollout`], handing each rendered frame to `sink` as
/// `(trajectory index, step index, per-camera images)`.
pub fn evaluate_with_frames(
    model: &Model,
    trajs: &[Trajectory],
    horizon: usize,
    mut sink: impl FnMut(usize, usize, &[Image]) -> Result<()>,
) -> Result<EvalReport> {
    if trajs.is_empty() || horizon == 0 {
        return Err(Error::invalid("evaluation needs trajectories and a positive horizon"));
    }
    let mut report = EvalReport {
        horizon,
        trajectories: trajs.iter().map(|t| t.name.clone()).collect(),
        psnr: vec![0.0; horizon],
        ssim: vec![0.0; horizon],
        baseline_psnr: vec![0.0; horizon],
        baseline_ssim: vec![0.0; horizon],
    };
    let mut count = 0usize;
    for (ti, traj) in trajs.iter().enumerate() {
        let preds = rollout_trajectory(model, traj, horizon, None)?;
        for (k, p) in preds.iter().enumerate() {
            let t = k + 2;
            let mut images = Vec::with_capacity(traj.cameras.len());
            for (c, cam) in traj.cameras.iter().enumerate() {
                let img = model.render(p, cam)?;
                let truth = &traj.frames[t][c].rgb;
                let last = &traj.frames[1][c].rgb;
                report.psnr[k] += psnr(&img.rgb, truth)?;
                report.ssim[k] += ssim(&img.rgb, truth, cam.width, cam.height)?;
                report.baseline_psnr[k] += psnr(last, truth)?;
                report.baseline_ssim[k] += ssim(last, truth, cam.width, cam.height)?;
                images.push(img);
            }
            sink(ti, k, &images)?;
        }
        count += traj.cameras.len();
    }
    let n = count as f64;
    for v in [
        &mut report.psnr,
        &mut report.ssim,
        &mut report.baseline_psnr,
        &mut report.baseline_ssim,
    ] {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(report)
}

/// Mean rollout PSNR with the encoder's particle budget set to each entry of
/// `budgets` in turn.
pub fn particle_scaling_benchmark(
    model: &Model,
    trajs: &[Trajectory],
    horizon: usize,
    budgets: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if !budgets.windows(2).all(|w| w[0] < w[1]) || budgets.contains(&0) {
        return Err(Error::invalid("budgets must be positive and ascending"));
    }
    let mut rows = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let mut m = model.clone();
        m.config.encoder.particle_budget = b;
        rows.push((b, evaluate_rollout(&m, trajs, horizon)?.mean_psnr()));
    }
    Ok(rows)
}

pub fn benchmark_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("budget,psnr\n");
    for (b, p) in rows {
        s += &format!("{b},{p:.4}\n");
    }
    s
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an interleaved RGB image in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, rgb: &[f32], width: usize, height: usize) -> Result<()> {
    save_strip(path, &[vec![rgb]], width, height)
}

/// Tiles equally sized images into a grid, `rows[r][c]`, and saves it.
pub fn save_strip(path: &Path, rows: &[Vec<&[f32]>], width: usize, height: usize) -> Result<()> {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::invalid("nothing to save"));
    }
    let (w, h) = ((width * cols) as u32, (height * rows.len()) as u32);
    let mut out = image::RgbImage::new(w, h);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.len() != width * height * 3 {
                return Err(Error::invalid("strip images must share one size"));
            }
            for j in 0..height {
                for i in 0..width {
                    let k = 3 * (j * width + i);
                    let px = image::Rgb([to_u8(img[k]), to_u8(img[k + 1]), to_u8(img[k + 2])]);
                    out.put_pixel((c * width + i) as u32, (r * height + j) as u32, px);
                }
            }
        }
    }
    out.save(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::data(format!("{}: {other}", path.display())),
        })
        .map(|_| ())
}

/// Writes raw predicted frames as VPDT tensors next to their PNGs.
pub fn save_frame(dir: &Path, stem: &str, img: &Image) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    save_png(&dir.join(format!("{stem}.png")), &img.rgb, img.width, img.height)?;
    let t = vpd_diff::Tensor::new(vec![img.height, img.width, 3], img.rgb.clone())?;
    let path = dir.join(format!("{stem}.rgb"));
    vpd_diff::checkpoint::save_tensor(&path, &t).at(&path)
}
