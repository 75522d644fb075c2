//! Reflection of points, Gaussians and view directions about the mirror
//! plane `<n, x> + b = 0`, together with the adjoints used by the renderer.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{matrix_to_quat, quat_to_matrix, normalize_quat, Gaussian, GaussianCloud};

/// Smallest normal length accepted as a valid plane.
pub const MIN_NORMAL_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// dL/d(n, b) for a plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlaneGrad {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl std::ops::AddAssign for PlaneGrad {
    fn add_assign(&mut self, rhs: Self) {
        self.normal += rhs.normal;
        self.offset += rhs.offset;
    }
}

impl MirrorPlane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    /// Plane through `point` with the given normal.
    pub fn through(point: &Vector3<f64>, normal: Vector3<f64>) -> Self {
        Self::new(normal, -normal.dot(point))
    }

    pub fn check(&self) -> Result<()> {
        let n = self.normal.norm();
        if n > MIN_NORMAL_NORM && n.is_finite() && self.offset.is_finite() {
            Ok(())
        } else {
            Err(Error::DegeneratePlane(n))
        }
    }

    /// Same plane with `|n| = 1`.
    pub fn normalized(&self) -> Result<Self> {
        self.check()?;
        let n = self.normal.norm();
        Ok(Self::new(self.normal / n, self.offset / n))
    }

    /// Flips the orientation so that most of `points` lie on the positive side.
    /// Ties keep the current orientation.
    pub fn oriented_toward(&self, points: &[Vector3<f64>]) -> Self {
        let front = points.iter().filter(|p| self.normal.dot(p) + self.offset > 0.0).count();
        let back = points.iter().filter(|p| self.normal.dot(p) + self.offset < 0.0).count();
        if back > front {
            Self::new(-self.normal, -self.offset)
        } else {
            *self
        }
    }

    /// Householder matrix `I - 2 n n^T / |n|^2`.
    pub fn householder(&self) -> Result<Matrix3<f64>> {
        self.check()?;
        Ok(householder_unchecked(&self.normal))
    }

    pub fn reflect_point(&self, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        self.check()?;
        Ok(reflect_unchecked(self, x))
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> Result<f64> {
        self.check()?;
        Ok((self.normal.dot(x) + self.offset) / self.normal.norm())
    }

    /// Mirrored copy of a Gaussian: mean reflected, covariance conjugated by
    /// the Householder matrix, every other attribute carried over.
    pub fn reflect_gaussian(&self, gaussian: &Gaussian) -> Result<Gaussian> {
        let h = self.householder()?;
        let mean = reflect_unchecked(self, &gaussian.mean);
        let r = quat_to_matrix(&normalize_quat(&gaussian.rotation));
        // Columns F(mu + R_i) - F(mu) = H R_i; the frame has det -1, so flip
        // the first axis. The covariance does not see the sign.
        let mut reflected = h * r;
        reflected.set_column(0, &(-reflected.column(0)));
        Ok(Gaussian {
            mean,
            rotation: matrix_to_quat(&reflected),
            ..gaussian.clone()
        })
    }

    /// Direction used to shade a mirrored Gaussian: `mu - F(camera_center)`,
    /// normalized, where `mu` is the mean of the unreflected Gaussian.
    pub fn mirrored_view_direction(
        &self,
        gaussian_mean: &Vector3<f64>,
        camera_center: &Vector3<f64>,
    ) -> Result<Vector3<f64>> {
        let v = gaussian_mean - self.reflect_point(camera_center)?;
        let n = v.norm();
        if n <= 1e-12 {
            return Err(Error::DegenerateView);
        }
        Ok(v / n)
    }

    /// Indices of the Gaussians whose means lie strictly on the front side.
    pub fn front_indices(&self, cloud: &GaussianCloud) -> Result<Vec<usize>> {
        self.check()?;
        Ok(cloud
            .gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| self.normal.dot(&g.mean) + self.offset > 0.0)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn filter_front(&self, cloud: &GaussianCloud) -> Result<GaussianCloud> {
        let keep = self.front_indices(cloud)?;
        Ok(GaussianCloud {
            gaussians: keep.into_iter().map(|i| cloud.gaussians[i].clone()).collect(),
            sh_degree: cloud.sh_degree,
        })
    }

    /// Reflects the front sub-cloud, giving the Gaussians of the mirror space.
    pub fn reflect_cloud(&self, cloud: &GaussianCloud) -> Result<GaussianCloud> {
        let front = self.filter_front(cloud)?;
        let gaussians = front
            .gaussians
            .iter()
            .map(|g| self.reflect_gaussian(g))
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianCloud {
            gaussians,
            sh_degree: cloud.sh_degree,
        })
    }

    pub fn angle_to(&self, other: &MirrorPlane) -> f64 {
        let c = self.normal.normalize().dot(&other.normal.normalize());
        c.clamp(-1.0, 1.0).acos()
    }
}

pub(crate) fn householder_unchecked(n: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - n * n.transpose() * (2.0 / n.norm_squared())
}

pub(crate) fn reflect_unchecked(plane: &MirrorPlane, x: &Vector3<f64>) -> Vector3<f64> {
    let n = &plane.normal;
    x - n * (2.0 * (n.dot(x) + plane.offset) / n.norm_squared())
}

/// Adjoint of `reflect_point`: given dL/dF(x), returns (dL/dx, dL/d plane).
pub fn reflect_point_backward(
    plane: &MirrorPlane,
    x: &Vector3<f64>,
    grad_out: &Vector3<f64>,
) -> (Vector3<f64>, PlaneGrad) {
    let n = &plane.normal;
    let m = n.norm_squared();
    let s = n.dot(x) + plane.offset;
    let ng = n.dot(grad_out);
    let grad_x = grad_out - n * (2.0 * ng / m);
    let grad_b = -2.0 * ng / m;
    let grad_n = -(x * ng / m + grad_out * (s / m) - n * (2.0 * s * ng / (m * m))) * 2.0;
    (
        grad_x,
        PlaneGrad {
            normal: grad_n,
            offset: grad_b,
        },
    )
}

/// Adjoint of `Sigma -> H Sigma H`: returns (dL/dSigma, dL/dn).
pub fn conjugate_backward(
    normal: &Vector3<f64>,
    cov: &Matrix3<f64>,
    grad_out: &Matrix3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let h = householder_unchecked(normal);
    let grad_cov = h * grad_out * h;
    let grad_h = grad_out * h * cov + cov * h * grad_out;
    let m = normal.norm_squared();
    let sym = grad_h + grad_h.transpose();
    let grad_n = -(sym * normal) * (2.0 / m) + normal * (4.0 * normal.dot(&(grad_h * normal)) / (m * m));
    (grad_cov, grad_n)
}
