//! Training losses and their gradients.

use nalgebra::Vector3;

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};
use crate::metrics::ssim_with_grad;
use crate::mirror::{MirrorPlane, PlaneGrad};
use crate::model::GaussianCloud;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_mask: f64,
    pub lambda_dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_mask: 0.2,
            lambda_dist: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lambda_ssim, "lambda_ssim"),
            (self.lambda_mask, "lambda_mask"),
            (self.lambda_dist, "lambda_dist"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1 - lambda) * mean|r - t| + lambda * (1 - SSIM(r, t)) / 2`.
pub fn loss_color(rendered: &ImageBuf, target: &ImageBuf, lambda_ssim: f64) -> Result<f64> {
    Ok(loss_color_grad(rendered, target, lambda_ssim)?.0)
}

/// Color loss and its gradient with respect to `rendered`.
pub fn loss_color_grad(rendered: &ImageBuf, target: &ImageBuf, lambda_ssim: f64) -> Result<(f64, ImageBuf)> {
    rendered.ensure_same_shape(target, "color loss")?;
    let n = rendered.data.len().max(1) as f64;
    let l1 = rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mut grad = ImageBuf::from_fn(rendered.width, rendered.height, rendered.channels, |x, y, c| {
        (1.0 - lambda_ssim) * sign(rendered.get(x, y, c) - target.get(x, y, c)) / n
    });
    let mut loss = (1.0 - lambda_ssim) * l1;
    if lambda_ssim != 0.0 {
        let (s, gs) = ssim_with_grad(rendered, target)?;
        loss += lambda_ssim * (1.0 - s) / 2.0;
        for (g, d) in grad.data.iter_mut().zip(&gs.data) {
            *g -= lambda_ssim * 0.5 * d;
        }
    }
    Ok((loss, grad))
}

/// Mean absolute difference between masks.
pub fn loss_mask(rendered: &ImageBuf, gt: &ImageBuf) -> Result<f64> {
    Ok(loss_mask_grad(rendered, gt)?.0)
}

pub fn loss_mask_grad(rendered: &ImageBuf, gt: &ImageBuf) -> Result<(f64, ImageBuf)> {
    rendered.ensure_same_shape(gt, "mask loss")?;
    let n = rendered.data.len().max(1) as f64;
    let loss = rendered.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let grad = rendered.data.iter().zip(&gt.data).map(|(a, b)| sign(a - b) / n).collect();
    Ok((
        loss,
        ImageBuf {
            data: grad,
            ..ImageBuf::new(rendered.width, rendered.height, rendered.channels)
        },
    ))
}

/// Gradient of the plane-distance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrad {
    pub mean: Vec<Vector3<f64>>,
    pub label_logit: Vec<f64>,
    pub plane: PlaneGrad,
}

/// `1/Q sum_i [ |<n, mu_i> + b| / |n| * (1 - k_i) ]^2`.
pub fn loss_distance(cloud: &GaussianCloud, plane: &MirrorPlane) -> Result<f64> {
    Ok(loss_distance_grad(cloud, plane)?.0)
}

pub fn loss_distance_grad(cloud: &GaussianCloud, plane: &MirrorPlane) -> Result<(f64, DistanceGrad)> {
    plane.check()?;
    if cloud.is_empty() {
        return Err(Error::Usage("distance loss needs at least one gaussian".into()));
    }
    let q = cloud.len() as f64;
    let n = &plane.normal;
    let m = n.norm_squared();
    let mut loss = 0.0;
    let mut grad = DistanceGrad {
        mean: Vec::with_capacity(cloud.len()),
        label_logit: Vec::with_capacity(cloud.len()),
        plane: PlaneGrad::default(),
    };
    for g in &cloud.gaussians {
        let s = n.dot(&g.mean) + plane.offset;
        let k = g.label();
        let w = (1.0 - k) * (1.0 - k);
        loss += s * s / m * w;
        grad.mean.push(n * (2.0 * s / m * w / q));
        grad.label_logit.push(-2.0 * (1.0 - k) * s * s / m / q * k * (1.0 - k));
        grad.plane.normal += (g.mean * (2.0 * s / m) - n * (2.0 * s * s / (m * m))) * (w / q);
        grad.plane.offset += 2.0 * s / m * w / q;
    }
    Ok((loss / q, grad))
}

/// `L_c + lambda_m L_m + lambda_d L_d`.
pub fn loss_total(color: f64, mask: f64, dist: f64, weights: &LossWeights) -> f64 {
    color + weights.lambda_mask * mask + weights.lambda_dist * dist
}
