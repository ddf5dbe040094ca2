//! Image kernels on single `[C, H, W]` tensors.

use crate::error::{shape_err, Result};
use crate::scalar::{mm, Real};
use crate::tensor::Tensor;

fn chw(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(shape_err(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Lays out every `k x k` patch (zero padded) as a column: `[C*k*k, H*W]`.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[y * w + xx] = src_row[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        plane[sy as usize * w + (xx as isize + dx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, wd) = chw(x, "conv2d")?;
    let (o, k) = match w.shape() {
        &[o, ci, k, k2] if ci == c && k == k2 && k % 2 == 1 => (o, k),
        s => {
            return Err(shape_err(
                "conv2d",
                format!("kernel {s:?} incompatible with input channels {c}"),
            ))
        }
    };
    if b.len() != o {
        return Err(shape_err("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
    }
    let hw = h * wd;
    let mut out = vec![T::zero(); o * hw];
    for (oi, row) in out.chunks_mut(hw).enumerate() {
        row.fill(b.data()[oi]);
    }
    if k == 1 {
        mm::ab(o, c, hw, w.data(), x.data(), &mut out, true);
    } else {
        let cols = im2col(x.data(), c, h, wd, k);
        mm::ab(o, c * k * k, hw, w.data(), &cols, &mut out, true);
    }
    Tensor::new(vec![o, h, wd], out)
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let hw = h * wd;
    let ckk = c * k * k;
    let gb = need_b.then(|| g.chunks(hw).map(|r| r.iter().copied().sum()).collect());
    let cols = if k == 1 || !need_w {
        None
    } else {
        Some(im2col(x.data(), c, h, wd, k))
    };
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); o * ckk];
        let src = cols.as_deref().unwrap_or(x.data());
        mm::abt(o, hw, ckk, g, src, &mut gw, false);
        gw
    });
    let gx = need_x.then(|| {
        if k == 1 {
            let mut gx = vec![T::zero(); c * hw];
            mm::atb(c, o, hw, w.data(), g, &mut gx, false);
            gx
        } else {
            let mut dcols = vec![T::zero(); ckk * hw];
            mm::atb(ckk, o, hw, w.data(), g, &mut dcols, false);
            let mut gx = vec![T::zero(); c * hw];
            col2im(&dcols, c, h, wd, k, &mut gx);
            gx
        }
    });
    (gx, gw, gb)
}

pub(crate) fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = chw(x, "max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(
            "max_pool2",
            format!("spatial size {h}x{w} is not divisible by 2"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * xx;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub(crate) fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ci * oh * ow + y * ow + xx] = src[ci * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub(crate) fn upsample2_backward<T: Real>(in_shape: &[usize], g: &[T]) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                gx[ci * h * w + (y / 2) * w + xx / 2] += g[ci * oh * ow + y * ow + xx];
            }
        }
    }
    gx
}
