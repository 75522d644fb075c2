//! Scene representation: Gaussians, clouds, cameras, activations and
//! spherical-harmonic shading.

mod camera;
mod gaussian;
pub mod sh;

pub use camera::Camera;
pub use gaussian::{
    activate, compose_covariance, covariance_backward, eval_sh, logit, matrix_to_quat, normalize_quat,
    quat_to_matrix, saturated_label_logit, sigmoid, Activated, Gaussian, GaussianCloud,
    LABEL_SATURATION_EPS,
};
pub(crate) use gaussian::{eval_sh_unchecked, sh_backward};
