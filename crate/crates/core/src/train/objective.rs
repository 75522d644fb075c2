//! Per-stage objectives: forward loss and gradients for one training view.

use crate::buffer::ImageBuf;
use crate::error::Result;
use crate::loss::{loss_color, loss_color_grad, loss_distance, loss_distance_grad, loss_mask, loss_mask_grad, loss_total, LossWeights};
use crate::mirror::{MirrorPlane, PlaneGrad};
use crate::model::{Camera, GaussianCloud};
use crate::raster::{
    composite_backward, composite_images, render, render_backward, render_replay, PassContext, RasterSettings,
    RenderGrad, RenderMode, RenderOutput, SceneGrads,
};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub color: f64,
    pub mask: f64,
    pub dist: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.color.is_finite() && self.mask.is_finite() && self.dist.is_finite() && self.total.is_finite()
    }
}

/// Stage 1: color loss of a plain render.
pub fn stage1_objective(
    cloud: &GaussianCloud,
    camera: &Camera,
    image: &ImageBuf,
    lambda_ssim: f64,
    settings: &RasterSettings,
) -> Result<(f64, SceneGrads, RenderOutput)> {
    let (out, ctx) = render(cloud, camera, RenderMode::Standard, None, settings)?;
    let (loss, g_color) = loss_color_grad(&out.color, image, lambda_ssim)?;
    let grads = render_backward(&ctx, cloud, &RenderGrad::color(g_color))?;
    Ok((loss, grads, out))
}

#[derive(Debug, Clone)]
pub struct Stage2Eval {
    pub loss: f64,
    pub plane: PlaneGrad,
    /// No Gaussian lies in front of the plane, so the mirror term is constant.
    pub front_empty: bool,
}

/// Stage 2: color loss of the real and mirrored renders fused with the
/// ground-truth mask; only the plane gradient is formed.
pub fn stage2_objective(
    cloud: &GaussianCloud,
    plane: &MirrorPlane,
    camera: &Camera,
    image: &ImageBuf,
    gt_mask: &ImageBuf,
    lambda_ssim: f64,
    settings: &RasterSettings,
) -> Result<Stage2Eval> {
    let (real, _) = render(cloud, camera, RenderMode::Standard, None, settings)?;
    let (mirror, ctx) = render(cloud, camera, RenderMode::Standard, Some(plane), settings)?;
    let fused = composite_images(&real.color, &mirror.color, gt_mask)?;
    let front_empty = plane.front_indices(cloud)?.is_empty();
    if front_empty {
        return Ok(Stage2Eval {
            loss: loss_color(&fused, image, lambda_ssim)?,
            plane: PlaneGrad::default(),
            front_empty,
        });
    }
    let (loss, g_fused) = loss_color_grad(&fused, image, lambda_ssim)?;
    let (_, g_mirror, _) = composite_backward(&real.color, &mirror.color, gt_mask, &g_fused)?;
    let grads = render_backward(&ctx, cloud, &RenderGrad::color(g_mirror))?;
    Ok(Stage2Eval {
        loss,
        plane: grads.plane,
        front_empty,
    })
}

/// Stage-3 forward state, kept for gradient checks by replay.
#[derive(Debug, Clone)]
pub struct Stage3Eval {
    pub loss: LossBreakdown,
    pub grads: SceneGrads,
    pub image: ImageBuf,
    pub mask: ImageBuf,
    real: PassContext,
    mirror: PassContext,
}

impl Stage3Eval {
    pub fn real_pass(&self) -> &PassContext {
        &self.real
    }

    pub fn mirror_pass(&self) -> &PassContext {
        &self.mirror
    }
}

fn stage3_losses(
    real: &RenderOutput,
    mirror: &RenderOutput,
    cloud: &GaussianCloud,
    plane: &MirrorPlane,
    image: &ImageBuf,
    gt_mask: &ImageBuf,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ImageBuf)> {
    let fused = composite_images(&real.color, &mirror.color, &real.mask)?;
    let color = loss_color(&fused, image, weights.lambda_ssim)?;
    let mask = loss_mask(&real.mask, gt_mask)?;
    let dist = loss_distance(cloud, plane)?;
    let total = loss_total(color, mask, dist, weights);
    Ok((LossBreakdown { color, mask, dist, total }, fused))
}

/// Stage 3: label-modulated real pass, mirrored pass, fusion with the
/// rendered mask, and `L_c + lambda_m L_m + lambda_d L_d`. Gradients cover
/// every Gaussian parameter, labels included, and the plane.
pub fn stage3_objective(
    cloud: &GaussianCloud,
    plane: &MirrorPlane,
    camera: &Camera,
    image: &ImageBuf,
    gt_mask: &ImageBuf,
    weights: &LossWeights,
    settings: &RasterSettings,
) -> Result<Stage3Eval> {
    let (real, real_ctx) = render(cloud, camera, RenderMode::LabelModulated, None, settings)?;
    let (mirror, mirror_ctx) = render(cloud, camera, RenderMode::Standard, Some(plane), settings)?;
    let fused = composite_images(&real.color, &mirror.color, &real.mask)?;

    let (color, g_fused) = loss_color_grad(&fused, image, weights.lambda_ssim)?;
    let (mask, g_mask_loss) = loss_mask_grad(&real.mask, gt_mask)?;
    let (dist, g_dist) = loss_distance_grad(cloud, plane)?;
    let total = loss_total(color, mask, dist, weights);

    let (g_real, g_mirror, mut g_mask) = composite_backward(&real.color, &mirror.color, &real.mask, &g_fused)?;
    for (a, b) in g_mask.data.iter_mut().zip(&g_mask_loss.data) {
        *a += weights.lambda_mask * b;
    }
    let mut grads = render_backward(
        &real_ctx,
        cloud,
        &RenderGrad {
            color: Some(g_real),
            mask: Some(g_mask),
            transmittance: None,
        },
    )?;
    let mirror_grads = render_backward(&mirror_ctx, cloud, &RenderGrad::color(g_mirror))?;
    grads.add(&mirror_grads);
    let wd = weights.lambda_dist;
    for (i, g) in grads.gaussians.iter_mut().enumerate() {
        g.mean += g_dist.mean[i] * wd;
        g.label_logit += g_dist.label_logit[i] * wd;
    }
    grads.plane.normal += g_dist.plane.normal * wd;
    grads.plane.offset += g_dist.plane.offset * wd;

    Ok(Stage3Eval {
        loss: LossBreakdown { color, mask, dist, total },
        grads,
        image: fused,
        mask: real.mask,
        real: real_ctx,
        mirror: mirror_ctx,
    })
}

/// Stage-3 loss with the visibility and blending order frozen from `eval`.
pub fn stage3_replay(
    eval: &Stage3Eval,
    cloud: &GaussianCloud,
    plane: &MirrorPlane,
    image: &ImageBuf,
    gt_mask: &ImageBuf,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let real = render_replay(&eval.real, cloud, None)?;
    let mirror = render_replay(&eval.mirror, cloud, Some(plane))?;
    Ok(stage3_losses(&real, &mirror, cloud, plane, image, gt_mask, weights)?.0)
}

/// Stage-3 loss from fresh renders.
pub fn stage3_loss(
    cloud: &GaussianCloud,
    plane: &MirrorPlane,
    camera: &Camera,
    image: &ImageBuf,
    gt_mask: &ImageBuf,
    weights: &LossWeights,
    settings: &RasterSettings,
) -> Result<LossBreakdown> {
    let (real, _) = render(cloud, camera, RenderMode::LabelModulated, None, settings)?;
    let (mirror, _) = render(cloud, camera, RenderMode::Standard, Some(plane), settings)?;
    Ok(stage3_losses(&real, &mirror, cloud, plane, image, gt_mask, weights)?.0)
}
