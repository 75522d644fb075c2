//! EWA projection of 3D Gaussians to screen-space splats.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::model::{Camera, Gaussian};

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected2DGaussian {
    pub mean2d: Vector2<f64>,
    /// Screen covariance including the low-pass term.
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Camera-space z of the mean.
    pub depth: f64,
    /// Conservative 3-sigma radius in pixels.
    pub radius: f64,
    pub source_index: usize,
}

/// Camera-space depth below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Projects without culling. `None` only when the mean is not in front of
/// the camera or the screen covariance is singular.
pub(crate) fn project_raw(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    camera: &Camera,
    low_pass: f64,
    source_index: usize,
) -> Option<Projected2DGaussian> {
    let t = camera.to_camera(mean);
    if t.z <= 0.0 {
        return None;
    }
    let j = jacobian(camera, &t);
    let m = j * camera.rotation;
    let cov2d = m * cov * m.transpose() + Matrix2::identity() * low_pass;
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda = mid + (mid * mid - det).max(0.1).sqrt();
    Some(Projected2DGaussian {
        mean2d: Vector2::new(camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy),
        cov2d,
        conic,
        depth: t.z,
        radius: (3.0 * lambda.sqrt()).ceil(),
        source_index,
    })
}

/// Projects with culling: behind the near plane, or a 3-sigma footprint that
/// misses the image, yields `None`.
pub(crate) fn project_culled(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    camera: &Camera,
    low_pass: f64,
    source_index: usize,
) -> Option<Projected2DGaussian> {
    if camera.to_camera(mean).z <= NEAR_PLANE {
        return None;
    }
    let p = project_raw(mean, cov, camera, low_pass, source_index)?;
    let (w, h) = (camera.width as f64, camera.height as f64);
    let misses = p.mean2d.x + p.radius < 0.0
        || p.mean2d.x - p.radius > w
        || p.mean2d.y + p.radius < 0.0
        || p.mean2d.y - p.radius > h;
    (!misses).then_some(p)
}

pub fn project_gaussian(gaussian: &Gaussian, camera: &Camera, low_pass: f64) -> Option<Projected2DGaussian> {
    project_culled(&gaussian.mean, &gaussian.covariance(), camera, low_pass, 0)
}

fn jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz2,
    )
}

/// Adjoint of the projection: maps dL/d(mean2d, cov2d) to dL/d(mean3, cov3).
pub(crate) fn project_backward(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    camera: &Camera,
    grad_mean2d: &Vector2<f64>,
    grad_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = &camera.rotation;
    let t = camera.to_camera(mean);
    let j = jacobian(camera, &t);
    let m = j * w;

    let grad_cov = m.transpose() * grad_cov2d * m;
    let grad_m = (grad_cov2d + grad_cov2d.transpose()) * m * cov;
    let grad_j = grad_m * w.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut grad_t = Vector3::new(
        grad_mean2d.x * fx * iz,
        grad_mean2d.y * fy * iz,
        -grad_mean2d.x * fx * t.x * iz2 - grad_mean2d.y * fy * t.y * iz2,
    );
    grad_t.x += grad_j[(0, 2)] * (-fx * iz2);
    grad_t.y += grad_j[(1, 2)] * (-fy * iz2);
    grad_t.z += grad_j[(0, 0)] * (-fx * iz2)
        + grad_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + grad_j[(1, 1)] * (-fy * iz2)
        + grad_j[(1, 2)] * (2.0 * fy * t.y * iz3);

    (w.transpose() * grad_t, grad_cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn axis_camera() -> Camera {
        Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, Matrix3::identity(), Vector3::zeros())
    }

    #[test]
    fn on_axis_isotropic_closed_form() {
        let cam = axis_camera();
        let sigma = 0.2;
        let z = 4.0;
        let p = project_raw(&Vector3::new(0.0, 0.0, z), &(Matrix3::identity() * sigma * sigma), &cam, 0.3, 0).unwrap();
        assert_relative_eq!(p.mean2d, Vector2::new(16.0, 16.0));
        let s = (40.0 * sigma / z).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d, Matrix2::identity() * s, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera();
        assert!(project_culled(&Vector3::new(0.0, 0.0, -1.0), &Matrix3::identity(), &cam, 0.3, 0).is_none());
    }

    #[test]
    fn doubling_depth_halves_screen_sigma() {
        let cam = axis_camera();
        let cov = Matrix3::from_diagonal(&Vector3::new(0.04, 0.09, 0.01));
        let a = project_raw(&Vector3::new(0.0, 0.0, 3.0), &cov, &cam, 0.0, 0).unwrap();
        let b = project_raw(&Vector3::new(0.0, 0.0, 6.0), &cov, &cam, 0.0, 0).unwrap();
        assert_relative_eq!(a.cov2d[(0, 0)].sqrt(), 2.0 * b.cov2d[(0, 0)].sqrt(), epsilon = 1e-12);
        assert_relative_eq!(a.cov2d[(1, 1)].sqrt(), 2.0 * b.cov2d[(1, 1)].sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn off_screen_footprint_is_culled() {
        let cam = axis_camera();
        let cov = Matrix3::identity() * 1e-4;
        assert!(project_culled(&Vector3::new(10.0, 0.0, 2.0), &cov, &cam, 0.3, 0).is_none());
        assert!(project_culled(&Vector3::new(0.1, 0.0, 2.0), &cov, &cam, 0.3, 0).is_some());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = Camera::look_at(Vector3::new(1.0, -2.0, 5.0), Vector3::zeros(), Vector3::z(), 30.0, 24, 20);
        let mean = Vector3::new(0.3, 0.4, -0.2);
        let cov = Matrix3::new(0.2, 0.05, -0.03, 0.05, 0.1, 0.02, -0.03, 0.02, 0.15);
        let gm = Vector2::new(0.7, -1.3);
        let gc = Matrix2::new(0.4, -0.2, -0.2, 0.9);
        let f = |mean: &Vector3<f64>, cov: &Matrix3<f64>| {
            let p = project_raw(mean, cov, &cam, 0.3, 0).unwrap();
            p.mean2d.dot(&gm) + p.cov2d.component_mul(&gc).sum()
        };
        let (g_mean, g_cov) = project_backward(&mean, &cov, &cam, &gm, &gc);
        let h = 1e-6;
        for i in 0..3 {
            let (mut a, mut b) = (mean, mean);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, &cov) - f(&b, &cov)) / (2.0 * h);
            assert!((fd - g_mean[i]).abs() < 1e-6 * fd.abs().max(1.0), "mean[{i}] {fd} {}", g_mean[i]);
        }
        for r in 0..3 {
            for c in 0..3 {
                let (mut a, mut b) = (cov, cov);
                a[(r, c)] += h;
                b[(r, c)] -= h;
                let fd = (f(&mean, &a) - f(&mean, &b)) / (2.0 * h);
                assert!((fd - g_cov[(r, c)]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
