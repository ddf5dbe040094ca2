//! Fused tape ops for annular kernel features and volumetric compositing.

use vpd_diff::{CustomOp, Real, Tensor};

/// `exp(-(d - r)^2 / b^2)` for the distance `d` between two points.
pub fn kernel_weight(x: &[f64; 3], y: &[f64; 3], r: f64, b: f64) -> f64 {
    let d = crate::geometry::dist2(x, y).sqrt();
    (-(d - r).powi(2) / (b * b)).exp()
}

/// Per-sample kernel features over a fixed neighbour list.
///
/// Inputs are particle positions `[N, 3]` and features `[N, F]`; the output is
/// `[S, m * F]` with one `F` block per kernel, in kernel order.
pub struct KernelFeatures<T> {
    /// `[S, 3]` sample positions.
    pub samples: Vec<[T; 3]>,
    /// `[S, k]` particle indices.
    pub neighbors: Vec<u32>,
    pub k: usize,
    pub radii: Vec<T>,
    pub bandwidths: Vec<T>,
    pub normalize: bool,
}

pub const NORMALIZE_EPS: f64 = 1e-8;

impl<T: Real> KernelFeatures<T> {
    fn weights(&self, pos: &[T], s: usize, j: usize, out: &mut Vec<(T, T, [T; 3])>) {
        out.clear();
        let x = self.samples[s];
        let (r, b) = (self.radii[j], self.bandwidths[j]);
        let inv_b2 = (b * b).recip();
        for &i in &self.neighbors[s * self.k..(s + 1) * self.k] {
            let p = &pos[i as usize * 3..i as usize * 3 + 3];
            let diff = [p[0] - x[0], p[1] - x[1], p[2] - x[2]];
            let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            let w = (-(d - r) * (d - r) * inv_b2).exp();
            out.push((w, d, diff));
        }
    }

    pub fn forward(&self, pos: &Tensor<T>, feat: &Tensor<T>) -> Tensor<T> {
        let (f, m) = (feat.cols(), self.radii.len());
        let s_count = self.samples.len();
        let mut out = vec![T::zero(); s_count * m * f];
        let mut ws = Vec::with_capacity(self.k);
        for s in 0..s_count {
            for j in 0..m {
                self.weights(pos.data(), s, j, &mut ws);
                let block = &mut out[(s * m + j) * f..(s * m + j + 1) * f];
                let mut total = T::zero();
                for (n, &(w, _, _)) in ws.iter().enumerate() {
                    let i = self.neighbors[s * self.k + n] as usize;
                    for (o, &z) in block.iter_mut().zip(feat.row(i)) {
                        *o += w * z;
                    }
                    total += w;
                }
                if self.normalize {
                    let inv = (total + T::lit(NORMALIZE_EPS)).recip();
                    block.iter_mut().for_each(|o| *o *= inv);
                }
            }
        }
        Tensor::new(vec![s_count, m * f], out).expect("kernel feature shape")
    }
}

impl<T: Real> CustomOp<T> for KernelFeatures<T> {
    fn name(&self) -> &'static str {
        "kernel_features"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (pos, feat) = (inputs[0], inputs[1]);
        let (f, m) = (feat.cols(), self.radii.len());
        let mut dpos = vec![T::zero(); pos.len()];
        let mut dfeat = vec![T::zero(); feat.len()];
        let mut ws = Vec::with_capacity(self.k);
        let two = T::lit(2.0);
        for s in 0..self.samples.len() {
            for j in 0..m {
                let at = (s * m + j) * f;
                let gblock = &grad_output[at..at + f];
                if gblock.iter().all(|g| *g == T::zero()) {
                    continue;
                }
                self.weights(pos.data(), s, j, &mut ws);
                let fblock = &output.data()[at..at + f];
                let inv = if self.normalize {
                    let total: T = ws.iter().map(|w| w.0).sum();
                    (total + T::lit(NORMALIZE_EPS)).recip()
                } else {
                    T::one()
                };
                let (r, b) = (self.radii[j], self.bandwidths[j]);
                for (n, &(w, d, diff)) in ws.iter().enumerate() {
                    let i = self.neighbors[s * self.k + n] as usize;
                    let z = feat.row(i);
                    if needs[1] {
                        for (dz, &g) in dfeat[i * f..(i + 1) * f].iter_mut().zip(gblock) {
                            *dz += w * inv * g;
                        }
                    }
                    if needs[0] && d > T::zero() {
                        // dL/dw for this neighbour, then chain through the kernel.
                        let mut dw = T::zero();
                        for c in 0..f {
                            let zc = if self.normalize { z[c] - fblock[c] } else { z[c] };
                            dw += gblock[c] * zc;
                        }
                        dw *= inv;
                        let dd = dw * w * (-two * (d - r) / (b * b));
                        for a in 0..3 {
                            dpos[i * 3 + a] += dd * diff[a] / d;
                        }
                    }
                }
            }
        }
        vec![needs[0].then_some(dpos), needs[1].then_some(dfeat)]
    }
}

/// Compositing weights `T_i (1 - exp(-sigma_i delta_i))` and the residual
/// transmittance.
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let w = sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let keep = (-s * d).exp();
            let w = trans * (1.0 - keep);
            trans *= keep;
            w
        })
        .collect();
    (w, trans)
}

/// Alpha compositing of `R` rays with `S` samples each against a background.
///
/// Inputs are densities `[R * S, 1]`, colors `[R * S, 3]` and the background
/// `[3]`; the output is `[R, 3]`.
pub struct Composite<T> {
    pub rays: usize,
    pub samples: usize,
    /// `[R * S]` segment lengths.
    pub deltas: Vec<T>,
}

impl<T: Real> Composite<T> {
    pub fn forward(&self, sigma: &Tensor<T>, rgb: &Tensor<T>, bg: &Tensor<T>) -> Tensor<T> {
        let mut out = vec![T::zero(); self.rays * 3];
        for r in 0..self.rays {
            let mut trans = T::one();
            let c = &mut out[r * 3..r * 3 + 3];
            for i in r * self.samples..(r + 1) * self.samples {
                let keep = (-sigma.data()[i] * self.deltas[i]).exp();
                let w = trans * (T::one() - keep);
                for a in 0..3 {
                    c[a] += w * rgb.data()[i * 3 + a];
                }
                trans *= keep;
            }
            for a in 0..3 {
                c[a] += trans * bg.data()[a];
            }
        }
        Tensor::new(vec![self.rays, 3], out).expect("composite shape")
    }

    /// Weights and residual transmittance of ray `r` for the given densities.
    pub fn ray_weights(&self, sigma: &[T], r: usize) -> (Vec<T>, T) {
        let mut trans = T::one();
        let range = r * self.samples..(r + 1) * self.samples;
        let w = sigma[range.clone()]
            .iter()
            .zip(&self.deltas[range])
            .map(|(&s, &d)| {
                let keep = (-s * d).exp();
                let w = trans * (T::one() - keep);
                trans *= keep;
                w
            })
            .collect();
        (w, trans)
    }
}

impl<T: Real> CustomOp<T> for Composite<T> {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (sigma, rgb, bg) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut dsigma = vec![T::zero(); sigma.len()];
        let mut drgb = vec![T::zero(); rgb.len()];
        let mut dbg = vec![T::zero(); 3];
        let s = self.samples;
        for r in 0..self.rays {
            let g = &grad_output[r * 3..r * 3 + 3];
            let (w, t_final) = self.ray_weights(sigma, r);
            for a in 0..3 {
                dbg[a] += t_final * g[a];
            }
            // Walk back to front carrying sum_{j>i} w_j c_j . g.
            let tail_bg: T = (0..3).map(|a| t_final * bg[a] * g[a]).sum();
            let mut suffix = T::zero();
            let mut trans_next = t_final;
            for i in (0..s).rev() {
                let at = r * s + i;
                let cg: T = (0..3).map(|a| rgb[at * 3 + a] * g[a]).sum();
                for a in 0..3 {
                    drgb[at * 3 + a] = w[i] * g[a];
                }
                dsigma[at] = self.deltas[at] * (trans_next * cg - suffix - tail_bg);
                suffix += w[i] * cg;
                // T_i = T_{i+1} + w_i.
                trans_next += w[i];
            }
        }
        vec![
            needs[0].then_some(dsigma),
            needs[1].then_some(drgb),
            needs[2].then_some(dbg),
        ]
    }
}
