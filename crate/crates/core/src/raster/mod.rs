//! Differentiable CPU rasterizer for Gaussian clouds.

mod blend;
mod pass;
mod project;

use nalgebra::Vector3;

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};
use crate::mirror::MirrorPlane;
use crate::model::{Camera, GaussianCloud};

pub use blend::RasterTrace;
pub use pass::{render, render_backward, render_replay, GaussianGrad, PassContext, SceneGrads};
pub use project::{project_gaussian, Projected2DGaussian, NEAR_PLANE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RenderMode {
    /// Color blended with `alpha`.
    Standard,
    /// Color blended with `alpha * k`; the mask still uses `alpha`.
    LabelModulated,
    /// Only the mask channel.
    MaskOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    /// Added to the screen covariance diagonal, in px^2.
    pub low_pass: f64,
    /// Contributions `alpha * G` below this are skipped.
    pub min_alpha: f64,
    /// A chain stops once its transmittance falls below this.
    pub min_transmittance: f64,
    pub tile_size: usize,
    pub background: Vector3<f64>,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            low_pass: 0.3,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
            tile_size: 16,
            background: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// H x W x 3.
    pub color: ImageBuf,
    /// H x W; 1 for real content, 0 for the mirror surface.
    pub mask: ImageBuf,
    pub final_transmittance: ImageBuf,
}

impl RenderOutput {
    pub(crate) fn empty(width: usize, height: usize) -> Self {
        Self {
            color: ImageBuf::new(width, height, 3),
            mask: ImageBuf::new(width, height, 1),
            final_transmittance: ImageBuf::filled(width, height, 1, 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// dL/d(RenderOutput). Absent channels count as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderGrad {
    pub color: Option<ImageBuf>,
    pub mask: Option<ImageBuf>,
    pub transmittance: Option<ImageBuf>,
}

impl RenderGrad {
    pub fn color(grad: ImageBuf) -> Self {
        Self {
            color: Some(grad),
            ..Self::default()
        }
    }

    pub(crate) fn check_shape(&self, width: usize, height: usize) -> Result<()> {
        for (buf, channels, what) in [
            (&self.color, 3, "color gradient"),
            (&self.mask, 1, "mask gradient"),
            (&self.transmittance, 1, "transmittance gradient"),
        ] {
            if let Some(b) = buf {
                if b.width != width || b.height != height || b.channels != channels {
                    return Err(Error::DimensionMismatch(format!(
                        "{what} is {}x{}x{}, expected {width}x{height}x{channels}",
                        b.width, b.height, b.channels
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The final view of a scene: without a plane, the plain real pass; with a
/// plane, the label-modulated real pass and the mirror pass composited with
/// the rendered mask. Returns (color, mask).
pub fn render_composite(
    cloud: &GaussianCloud,
    plane: Option<&MirrorPlane>,
    camera: &Camera,
    settings: &RasterSettings,
) -> Result<(ImageBuf, ImageBuf)> {
    match plane {
        None => {
            let (out, _) = render(cloud, camera, RenderMode::Standard, None, settings)?;
            Ok((out.color, out.mask))
        }
        Some(plane) => {
            let (real, _) = render(cloud, camera, RenderMode::LabelModulated, None, settings)?;
            let (mirror, _) = render(cloud, camera, RenderMode::Standard, Some(plane), settings)?;
            let color = composite(&real, &mirror, &real.mask)?;
            Ok((color, real.mask))
        }
    }
}

/// `real * mask + mirror * (1 - mask)` per pixel.
pub fn composite(real: &RenderOutput, mirror: &RenderOutput, mask: &ImageBuf) -> Result<ImageBuf> {
    composite_images(&real.color, &mirror.color, mask)
}

pub fn composite_images(real: &ImageBuf, mirror: &ImageBuf, mask: &ImageBuf) -> Result<ImageBuf> {
    check_composite(real, mirror, mask)?;
    Ok(ImageBuf::from_fn(real.width, real.height, real.channels, |x, y, c| {
        let m = mask.get(x, y, 0);
        real.get(x, y, c) * m + mirror.get(x, y, c) * (1.0 - m)
    }))
}

/// Adjoint of [`composite_images`]: (dL/d real, dL/d mirror, dL/d mask).
pub fn composite_backward(
    real: &ImageBuf,
    mirror: &ImageBuf,
    mask: &ImageBuf,
    grad: &ImageBuf,
) -> Result<(ImageBuf, ImageBuf, ImageBuf)> {
    check_composite(real, mirror, mask)?;
    real.ensure_same_shape(grad, "composite gradient")?;
    let g_real = ImageBuf::from_fn(real.width, real.height, real.channels, |x, y, c| {
        grad.get(x, y, c) * mask.get(x, y, 0)
    });
    let g_mirror = ImageBuf::from_fn(real.width, real.height, real.channels, |x, y, c| {
        grad.get(x, y, c) * (1.0 - mask.get(x, y, 0))
    });
    let g_mask = ImageBuf::from_fn(real.width, real.height, 1, |x, y, _| {
        (0..real.channels)
            .map(|c| grad.get(x, y, c) * (real.get(x, y, c) - mirror.get(x, y, c)))
            .sum()
    });
    Ok((g_real, g_mirror, g_mask))
}

fn check_composite(real: &ImageBuf, mirror: &ImageBuf, mask: &ImageBuf) -> Result<()> {
    real.ensure_same_shape(mirror, "mirror image")?;
    if mask.width != real.width || mask.height != real.height || mask.channels != 1 {
        return Err(Error::DimensionMismatch(format!(
            "mask is {}x{}x{}, image is {}x{}",
            mask.width, mask.height, mask.channels, real.width, real.height
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
