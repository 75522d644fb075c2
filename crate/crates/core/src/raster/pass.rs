//! Scene-level render pass: from raw Gaussian parameters (optionally
//! reflected about a mirror plane) to images, and back to parameter
//! gradients.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::mirror::{conjugate_backward, householder_unchecked, reflect_point_backward, reflect_unchecked, MirrorPlane, PlaneGrad};
use crate::model::{
    activate, compose_covariance, covariance_backward, eval_sh_unchecked, sh_backward, Camera, Gaussian,
    GaussianCloud,
};

use super::blend::{rasterize, rasterize_backward, rasterize_replay, RasterTrace, Splat};
use super::project::{project_backward, project_culled, project_raw};
use super::{RasterSettings, RenderGrad, RenderMode, RenderOutput};

/// Everything needed to differentiate or replay a forward pass.
#[derive(Debug, Clone)]
pub struct PassContext {
    camera: Camera,
    mode: RenderMode,
    settings: RasterSettings,
    plane: Option<MirrorPlane>,
    cloud_len: usize,
    /// Cloud index of every rasterized splat.
    slots: Vec<usize>,
    splats: Vec<Splat>,
    trace: RasterTrace,
}

impl PassContext {
    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn mode(&self) -> RenderMode {
        self.mode
    }

    pub fn plane(&self) -> Option<&MirrorPlane> {
        self.plane.as_ref()
    }

    /// Cloud indices of the Gaussians that reached the rasterizer.
    pub fn visible_indices(&self) -> &[usize] {
        &self.slots
    }

    pub fn trace(&self) -> &RasterTrace {
        &self.trace
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
    pub label_logit: f64,
}

impl GaussianGrad {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            mean: Vector3::zeros(),
            rotation: Vector4::zeros(),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros(); sh_len],
            label_logit: 0.0,
        }
    }

    pub fn add(&mut self, o: &GaussianGrad) {
        self.mean += o.mean;
        self.rotation += o.rotation;
        self.log_scale += o.log_scale;
        self.opacity_logit += o.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            *a += b;
        }
        self.label_logit += o.label_logit;
    }
}

/// Gradients for a whole cloud (and plane) from one or more passes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub gaussians: Vec<GaussianGrad>,
    pub plane: PlaneGrad,
    /// dL/d(screen mean) in pixels for the pass; summed when merged.
    pub mean2d: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl SceneGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            gaussians: cloud.gaussians.iter().map(|g| GaussianGrad::zeros(g.sh.len())).collect(),
            plane: PlaneGrad::default(),
            mean2d: vec![Vector2::zeros(); n],
            visible: vec![false; n],
        }
    }

    pub fn add(&mut self, o: &SceneGrads) {
        for (a, b) in self.gaussians.iter_mut().zip(&o.gaussians) {
            a.add(b);
        }
        self.plane += o.plane;
        for (a, b) in self.mean2d.iter_mut().zip(&o.mean2d) {
            *a += b;
        }
        for (a, b) in self.visible.iter_mut().zip(&o.visible) {
            *a |= *b;
        }
    }
}

/// World-space quantities of one Gaussian as seen by the pass.
struct Placed {
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    base_cov: Matrix3<f64>,
    view: Vector3<f64>,
}

fn place(g: &Gaussian, plane: Option<&MirrorPlane>, cam_center: &Vector3<f64>) -> Placed {
    let base_cov = compose_covariance(&g.rotation, &g.log_scale);
    match plane {
        None => Placed {
            mean: g.mean,
            cov: base_cov,
            base_cov,
            view: g.mean - cam_center,
        },
        Some(p) => {
            let h = householder_unchecked(&p.normal);
            Placed {
                mean: reflect_unchecked(p, &g.mean),
                cov: h * base_cov * h,
                base_cov,
                view: g.mean - reflect_unchecked(p, cam_center),
            }
        }
    }
}

fn shade(g: &Gaussian, view: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let raw = eval_sh_unchecked(&g.sh, &(view / view.norm()));
    (raw.map(|v| v.max(0.0)), raw)
}

fn make_splat(g: &Gaussian, placed: &Placed, proj: &super::Projected2DGaussian, order: usize) -> Splat {
    Splat {
        mean2d: proj.mean2d,
        conic: proj.conic,
        depth: proj.depth,
        radius: proj.radius,
        color: shade(g, &placed.view).0,
        opacity: g.opacity(),
        label: g.label(),
        order,
    }
}

/// Renders `cloud` from `camera`. With a plane, only the Gaussians strictly
/// in front of it are reflected and rendered, shaded along the mirrored view
/// direction.
pub fn render(
    cloud: &GaussianCloud,
    camera: &Camera,
    mode: RenderMode,
    plane: Option<&MirrorPlane>,
    settings: &RasterSettings,
) -> Result<(RenderOutput, PassContext)> {
    camera.validate()?;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        activate(g, i)?;
    }
    let candidates: Vec<usize> = match plane {
        Some(p) => p.front_indices(cloud)?,
        None => (0..cloud.len()).collect(),
    };
    let center = camera.center();
    let mut slots = Vec::new();
    let mut splats = Vec::new();
    for i in candidates {
        let g = &cloud.gaussians[i];
        let placed = place(g, plane, &center);
        if let Some(proj) = project_culled(&placed.mean, &placed.cov, camera, settings.low_pass, i) {
            if placed.view.norm() <= 1e-12 {
                continue;
            }
            splats.push(make_splat(g, &placed, &proj, i));
            slots.push(i);
        }
    }
    let (out, trace) = rasterize(&splats, camera.width, camera.height, mode, settings);
    let ctx = PassContext {
        camera: camera.clone(),
        mode,
        settings: *settings,
        plane: plane.copied(),
        cloud_len: cloud.len(),
        slots,
        splats,
        trace,
    };
    Ok((out, ctx))
}

/// Re-renders with new parameter values but the visible set, depth order and
/// per-pixel contributions frozen from `ctx`. The result is a smooth
/// function of the parameters, which is what finite-difference checks need.
pub fn render_replay(ctx: &PassContext, cloud: &GaussianCloud, plane: Option<&MirrorPlane>) -> Result<RenderOutput> {
    check_cloud(ctx, cloud)?;
    if plane.is_some() != ctx.plane.is_some() {
        return Err(Error::Usage("replay plane does not match the recorded pass".into()));
    }
    let center = ctx.camera.center();
    let splats = ctx
        .slots
        .iter()
        .zip(&ctx.splats)
        .map(|(&i, recorded)| {
            let g = &cloud.gaussians[i];
            let placed = place(g, plane, &center);
            let proj = project_raw(&placed.mean, &placed.cov, &ctx.camera, ctx.settings.low_pass, i)
                .ok_or_else(|| Error::Usage(format!("gaussian {i} left the view during replay")))?;
            let mut s = make_splat(g, &placed, &proj, i);
            s.depth = recorded.depth;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    rasterize_replay(&splats, &ctx.trace, &ctx.settings)
}

fn check_cloud(ctx: &PassContext, cloud: &GaussianCloud) -> Result<()> {
    if cloud.len() != ctx.cloud_len {
        return Err(Error::Usage(format!(
            "render context was recorded for {} gaussians, got {}",
            ctx.cloud_len,
            cloud.len()
        )));
    }
    Ok(())
}

fn sigmoid_grad(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Gradients of a scalar loss with respect to every raw parameter of the
/// cloud, and of the plane when the pass was mirrored.
pub fn render_backward(ctx: &PassContext, cloud: &GaussianCloud, grad: &RenderGrad) -> Result<SceneGrads> {
    check_cloud(ctx, cloud)?;
    let splat_grads = rasterize_backward(&ctx.splats, &ctx.trace, &ctx.settings, grad)?;
    let mut out = SceneGrads::zeros(cloud);
    let center = ctx.camera.center();
    let plane = ctx.plane.as_ref();
    for ((&i, sg), splat) in ctx.slots.iter().zip(&splat_grads).zip(&ctx.splats) {
        let g = &cloud.gaussians[i];
        let placed = place(g, plane, &center);
        let (g_mean_w, g_cov_w) = project_backward(&placed.mean, &placed.cov, &ctx.camera, &sg.mean2d, &sg.cov2d);

        let (_, raw) = shade(g, &placed.view);
        let g_color = Vector3::from_fn(|c, _| if raw[c] < 0.0 { 0.0 } else { sg.color[c] });
        let (g_sh, g_view) = sh_backward(&g.sh, &placed.view, &g_color);

        let gg = &mut out.gaussians[i];
        let g_base_cov = match plane {
            None => {
                gg.mean += g_mean_w + g_view;
                g_cov_w
            }
            Some(p) => {
                let (g_mu, g_plane) = reflect_point_backward(p, &g.mean, &g_mean_w);
                gg.mean += g_mu + g_view;
                out.plane += g_plane;
                let (_, g_plane_view) = reflect_point_backward(p, &center, &(-g_view));
                out.plane += g_plane_view;
                let (g_cov, g_n) = conjugate_backward(&p.normal, &placed.base_cov, &g_cov_w);
                out.plane.normal += g_n;
                g_cov
            }
        };
        let (g_q, g_ls) = covariance_backward(&g.rotation, &g.log_scale, &g_base_cov);
        gg.rotation += g_q;
        gg.log_scale += g_ls;
        for (a, b) in gg.sh.iter_mut().zip(&g_sh) {
            *a += b;
        }
        gg.opacity_logit += sg.opacity * sigmoid_grad(splat.opacity);
        gg.label_logit += sg.label * sigmoid_grad(splat.label);
        out.mean2d[i] += sg.mean2d;
        out.visible[i] = true;
    }
    Ok(out)
}

#[cfg(test)]
impl PassContext {
    pub(crate) fn splats_for_test(&self) -> Vec<Splat> {
        self.splats.clone()
    }
}
