//! Image quality metrics: PSNR, SSIM (with its gradient) and mask IoU.

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(psnr_from_mse(mse))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR over the pixels where `select` is at least 0.5.
pub fn psnr_masked(a: &ImageBuf, b: &ImageBuf, select: &ImageBuf) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    check_mask(a, select)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if select.get(x, y, 0) >= 0.5 {
                for c in 0..a.channels {
                    sum += (a.get(x, y, c) - b.get(x, y, c)).powi(2);
                }
                count += a.channels;
            }
        }
    }
    if count == 0 {
        return Err(Error::DimensionMismatch("psnr mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn check_mask(img: &ImageBuf, mask: &ImageBuf) -> Result<()> {
    if mask.width != img.width || mask.height != img.height || mask.channels != 1 {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{}x{} does not match image {}x{}",
            mask.width, mask.height, mask.channels, img.width, img.height
        )));
    }
    Ok(())
}

/// Intersection over union of `pred >= 0.5` and `gt >= 0.5`. Two empty
/// masks give 1.
pub fn mask_iou(pred: &ImageBuf, gt: &ImageBuf) -> Result<f64> {
    pred.ensure_same_shape(gt, "mask iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (*p >= 0.5, *g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian blur with zero padding, same output size. The kernel
/// is symmetric, so this operator is self-adjoint.
fn blur(src: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &ImageBuf, b: &ImageBuf) -> Result<(f64, ImageBuf)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn ssim_impl(a: &ImageBuf, b: &ImageBuf, want_grad: bool) -> Result<(f64, Option<ImageBuf>)> {
    a.ensure_same_shape(b, "ssim")?;
    let (w, h, nc) = (a.width, a.height, a.channels);
    let n = (w * h * nc) as f64;
    let k = window();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuf::new(w, h, nc));
    for c in 0..nc {
        let x = a.channel(c).data;
        let y = b.channel(c).data;
        let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let exx = blur(&sq(&x), w, h, &k);
        let eyy = blur(&sq(&y), w, h, &k);
        let exy = blur(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>(), w, h, &k);
        let mut g_mx = vec![0.0; x.len()];
        let mut g_exx = vec![0.0; x.len()];
        let mut g_exy = vec![0.0; x.len()];
        for i in 0..x.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let ta = 2.0 * ux * uy + C1;
            let tb = 2.0 * sxy + C2;
            let tc = ux * ux + uy * uy + C1;
            let td = sxx + syy + C2;
            let s = ta * tb / (tc * td);
            total += s;
            if want_grad {
                g_mx[i] = ((2.0 * uy * tb - 2.0 * uy * ta) / (tc * td) - s * (2.0 * ux / tc - 2.0 * ux / td)) / n;
                g_exx[i] = -s / td / n;
                g_exy[i] = 2.0 * ta / (tc * td) / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            let bx = blur(&g_mx, w, h, &k);
            let bxx = blur(&g_exx, w, h, &k);
            let bxy = blur(&g_exy, w, h, &k);
            for i in 0..x.len() {
                g.data[i * nc + c] = bx[i] + 2.0 * x[i] * bxx[i] + y[i] * bxy[i];
            }
        }
    }
    Ok((total / n, grad))
}
