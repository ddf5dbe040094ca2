//! Image quality metrics on interleaved RGB images in `[0, 1]`.

use crate::error::{Error, Result};

/// PSNR returned when two images are (numerically) identical.
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("image sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `-10 log10(MSE)` for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    /// Std of the Gaussian window weights.
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn grayscale(rgb: &[f32]) -> Vec<f64> {
    rgb.chunks_exact(3)
        .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
        .collect()
}

/// Mean SSIM over every full window position, on channel-mean grayscale.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    ssim_with(a, b, width, height, SsimParams::default())
}

pub fn ssim_with(a: &[f32], b: &[f32], width: usize, height: usize, p: SsimParams) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height * 3 {
        return Err(Error::invalid(format!(
            "ssim needs two {width}x{height} RGB images, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let n = p.window;
    if n == 0 || width < n || height < n {
        return Err(Error::invalid(format!(
            "{width}x{height} image is smaller than the {n}x{n} ssim window"
        )));
    }
    let (x, y) = (grayscale(a), grayscale(b));
    let half = (n as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * p.sigma * p.sigma)).exp())
        .collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let c1 = (p.k1 * 1.0).powi(2);
    let c2 = (p.k2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for j0 in 0..=height - n {
        for i0 in 0..=width - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dj in 0..n {
                for di in 0..n {
                    let w = g1[dj] * g1[di] / norm;
                    let k = (j0 + dj) * width + i0 + di;
                    mx += w * x[k];
                    my += w * y[k];
                    sxx += w * x[k] * x[k];
                    syy += w * y[k] * y[k];
                    sxy += w * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
