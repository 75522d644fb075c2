use nalgebra::{Matrix3, Vector3, Vector4};

use super::sh;
use crate::error::{Error, Result};

/// Guard used when a mirror label is pinned to "real world": k = 1 - eps.
pub const LABEL_SATURATION_EPS: f64 = 1e-4;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logit for which the activated label equals `1 - LABEL_SATURATION_EPS`.
pub fn saturated_label_logit() -> f64 {
    logit(1.0 - LABEL_SATURATION_EPS)
}

/// One anisotropic Gaussian, stored in unconstrained (pre-activation) form.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Quaternion as (w, x, y, z); normalized on activation.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// One RGB triple per SH basis function, `(L + 1)^2` entries.
    pub sh: Vec<Vector3<f64>>,
    pub label_logit: f64,
}

impl Gaussian {
    /// Axis-aligned Gaussian with a constant (view-independent) color.
    pub fn with_color(
        mean: Vector3<f64>,
        log_scale: Vector3<f64>,
        opacity: f64,
        rgb: Vector3<f64>,
        sh_degree: usize,
    ) -> Self {
        let mut coeffs = vec![Vector3::zeros(); sh::num_coeffs(sh_degree)];
        coeffs[0] = sh::rgb_to_dc(&rgb);
        Self {
            mean,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale,
            opacity_logit: logit(opacity),
            sh: coeffs,
            label_logit: saturated_label_logit(),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn label(&self) -> f64 {
        sigmoid(self.label_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        compose_covariance(&self.rotation, &self.log_scale)
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        if !self.mean.iter().all(|v| v.is_finite()) {
            Some("mean")
        } else if !self.rotation.iter().all(|v| v.is_finite()) || self.rotation.norm() == 0.0 {
            Some("rotation")
        } else if !self.log_scale.iter().all(|v| v.is_finite()) {
            Some("log_scale")
        } else if !self.opacity_logit.is_finite() {
            Some("opacity_logit")
        } else if !self.sh.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            Some("sh_coeffs")
        } else if self.label_logit.is_nan() {
            // +-inf label logits are allowed: they saturate to exactly 0 or 1.
            Some("label_logit")
        } else {
            None
        }
    }
}

/// Ordered collection of Gaussians sharing one SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Checks the shared-degree invariant and finiteness of every parameter.
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "sh degree {} exceeds the supported maximum {}",
                self.sh_degree,
                sh::MAX_SH_DEGREE
            )));
        }
        let expected = sh::num_coeffs(self.sh_degree);
        for (index, g) in self.gaussians.iter().enumerate() {
            if g.sh.len() != expected {
                return Err(Error::Config(format!(
                    "gaussian {index} has {} sh coefficients, expected {expected}",
                    g.sh.len()
                )));
            }
            if let Some(what) = g.first_non_finite() {
                return Err(Error::NonFinite { index, what });
            }
        }
        Ok(())
    }

    /// Renormalizes every rotation quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            let n = g.rotation.norm();
            if n > 0.0 {
                g.rotation /= n;
            }
        }
    }
}

/// Activated parameters of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Activated {
    pub mean: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub label: f64,
}

pub fn activate(gaussian: &Gaussian, index: usize) -> Result<Activated> {
    if let Some(what) = gaussian.first_non_finite() {
        return Err(Error::NonFinite { index, what });
    }
    Ok(Activated {
        mean: gaussian.mean,
        rotation: quat_to_matrix(&normalize_quat(&gaussian.rotation)),
        scale: gaussian.scale(),
        opacity: gaussian.opacity(),
        label: gaussian.label(),
    })
}

pub fn normalize_quat(q: &Vector4<f64>) -> Vector4<f64> {
    q / q.norm()
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion (w, x, y, z) of a proper rotation matrix.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let q = q.quaternion();
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// `R diag(exp(2 log_scale)) R^T` for the normalized rotation.
pub fn compose_covariance(rotation: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(&normalize_quat(rotation));
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

/// Gradient of a scalar loss through `compose_covariance`, given dL/dSigma.
/// Returns (dL/d rotation, dL/d log_scale) for the raw (unnormalized) quaternion.
pub fn covariance_backward(
    rotation: &Vector4<f64>,
    log_scale: &Vector3<f64>,
    grad_cov: &Matrix3<f64>,
) -> (Vector4<f64>, Vector3<f64>) {
    let norm = rotation.norm();
    let q = rotation / norm;
    let r = quat_to_matrix(&q);
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    let d = Matrix3::from_diagonal(&s2);

    let rgr = r.transpose() * grad_cov * r;
    let grad_ls = Vector3::new(2.0 * s2[0] * rgr[(0, 0)], 2.0 * s2[1] * rgr[(1, 1)], 2.0 * s2[2] * rgr[(2, 2)]);

    let g = (grad_cov + grad_cov.transpose()) * r * d;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gq = Vector4::new(gw, gx, gy, gz);
    let grad_q = (gq - q * q.dot(&gq)) / norm;
    (grad_q, grad_ls)
}

/// View-dependent color `0.5 + sum_k c_k Y_k(d)` (not clamped).
pub fn eval_sh(coeffs: &[Vector3<f64>], direction: &Vector3<f64>) -> Result<Vector3<f64>> {
    let n = coeffs.len();
    if !(0..=sh::MAX_SH_DEGREE).any(|l| sh::num_coeffs(l) == n) {
        return Err(Error::Config(format!(
            "{n} sh coefficients do not correspond to a degree <= {}",
            sh::MAX_SH_DEGREE
        )));
    }
    Ok(eval_sh_unchecked(coeffs, direction))
}

pub(crate) fn eval_sh_unchecked(coeffs: &[Vector3<f64>], direction: &Vector3<f64>) -> Vector3<f64> {
    let mut basis = [0.0; 16];
    let basis = &mut basis[..coeffs.len()];
    sh::basis(direction, basis);
    let mut color = Vector3::repeat(0.5);
    for (c, b) in coeffs.iter().zip(basis.iter()) {
        color += c * *b;
    }
    color
}

/// Backward of `eval_sh(coeffs, v / |v|)`.
///
/// `grad_color` must already be zeroed on clamped channels. Returns the
/// coefficient gradients and dL/dv for the unnormalized direction `v`.
pub(crate) fn sh_backward(
    coeffs: &[Vector3<f64>],
    v: &Vector3<f64>,
    grad_color: &Vector3<f64>,
) -> (Vec<Vector3<f64>>, Vector3<f64>) {
    let len = v.norm();
    let d = v / len;
    let mut basis = [0.0; 16];
    let mut dbasis = [Vector3::zeros(); 16];
    let n = coeffs.len();
    sh::basis(&d, &mut basis[..n]);
    sh::basis_grad(&d, &mut dbasis[..n]);
    let grad_coeffs = basis[..n].iter().map(|b| grad_color * *b).collect();
    let mut grad_d = Vector3::zeros();
    for k in 1..n {
        grad_d += dbasis[k] * coeffs[k].dot(grad_color);
    }
    let grad_v = (grad_d - d * d.dot(&grad_d)) / len;
    (grad_coeffs, grad_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot_z(theta: f64) -> Vector4<f64> {
        Vector4::new((theta / 2.0).cos(), 0.0, 0.0, (theta / 2.0).sin())
    }

    #[test]
    fn covariance_identity_rotation_is_diagonal_of_squares() {
        let cov = compose_covariance(
            &Vector4::new(1.0, 0.0, 0.0, 0.0),
            &Vector3::new(0.0, 2f64.ln(), 3f64.ln()),
        );
        assert_relative_eq!(cov, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_quarter_turn_swaps_axes() {
        let cov = compose_covariance(&rot_z(std::f64::consts::FRAC_PI_2), &Vector3::new(0.0, 2f64.ln(), 0.0));
        assert_relative_eq!(cov, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn unit_scale_gives_identity() {
        let cov = compose_covariance(&Vector4::new(0.3, -0.2, 0.9, 0.1), &Vector3::zeros());
        assert_relative_eq!(cov, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn sh_dc_only() {
        let mut coeffs = vec![Vector3::zeros(); 16];
        coeffs[0] = Vector3::new(1.0, 1.0, 1.0);
        let c = eval_sh(&coeffs, &Vector3::new(0.0, 0.6, 0.8)).unwrap();
        assert_relative_eq!(c.x, 0.5 + 0.28209479177, epsilon = 1e-10);
        let zero = eval_sh(&vec![Vector3::zeros(); 4], &Vector3::z()).unwrap();
        assert_eq!(zero, Vector3::repeat(0.5));
    }

    #[test]
    fn sh_y10_is_odd_in_z() {
        let mut coeffs = vec![Vector3::zeros(); 4];
        coeffs[2] = Vector3::new(0.7, -0.3, 0.2);
        let up = eval_sh(&coeffs, &Vector3::z()).unwrap();
        let down = eval_sh(&coeffs, &-Vector3::z()).unwrap();
        assert_relative_eq!((up + down) / 2.0, Vector3::repeat(0.5), epsilon = 1e-12);
        assert!((up - down).norm() > 0.1);
    }

    #[test]
    fn sh_rejects_unsupported_degree() {
        assert!(matches!(eval_sh(&vec![Vector3::zeros(); 25], &Vector3::z()), Err(Error::Config(_))));
        assert!(matches!(eval_sh(&vec![Vector3::zeros(); 5], &Vector3::z()), Err(Error::Config(_))));
    }

    #[test]
    fn activation_examples() {
        let mut g = Gaussian::with_color(Vector3::zeros(), Vector3::zeros(), 0.5, Vector3::repeat(0.5), 0);
        g.opacity_logit = 0.0;
        g.rotation = Vector4::new(2.0, 0.0, 0.0, 0.0);
        g.label_logit = f64::INFINITY;
        let a = activate(&g, 0).unwrap();
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.label, 1.0);
        assert_relative_eq!(a.rotation, Matrix3::identity(), epsilon = 1e-15);
        assert!(sigmoid(40.0) > 1.0 - 1e-15);
    }

    #[test]
    fn activation_reports_non_finite_index() {
        let mut g = Gaussian::with_color(Vector3::zeros(), Vector3::zeros(), 0.5, Vector3::repeat(0.5), 0);
        g.mean.y = f64::NAN;
        match activate(&g, 7) {
            Err(Error::NonFinite { index: 7, what: "mean" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let q = Vector4::new(0.8, -0.3, 0.4, 0.2) * 1.7;
        let ls = Vector3::new(-0.4, 0.1, 0.35);
        let w = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.2, -0.4, 1.1, 0.6, -0.9);
        let f = |q: &Vector4<f64>, ls: &Vector3<f64>| compose_covariance(q, ls).component_mul(&w).sum();
        let (gq, gls) = covariance_backward(&q, &ls, &w);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (f(&qp, &ls) - f(&qm, &ls)) / (2.0 * h);
            assert!((fd - gq[i]).abs() < 1e-7, "q[{i}]: {fd} vs {}", gq[i]);
        }
        for i in 0..3 {
            let mut lp = ls;
            let mut lm = ls;
            lp[i] += h;
            lm[i] -= h;
            let fd = (f(&q, &lp) - f(&q, &lm)) / (2.0 * h);
            assert!((fd - gls[i]).abs() < 1e-7, "ls[{i}]");
        }
    }

    #[test]
    fn sh_backward_matches_finite_differences() {
        let coeffs: Vec<Vector3<f64>> = (0..16)
            .map(|k| Vector3::new((k as f64 * 0.37).sin(), (k as f64 * 0.71).cos(), 0.1 * k as f64 - 0.5))
            .collect();
        let v = Vector3::new(0.4, -1.3, 2.1);
        let gc = Vector3::new(0.2, -0.7, 1.1);
        let f = |v: &Vector3<f64>| eval_sh_unchecked(&coeffs, &v.normalize()).dot(&gc);
        let (_, gv) = sh_backward(&coeffs, &v, &gc);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - gv[i]).abs() < 1e-8);
        }
    }

    fn arb_quat() -> impl Strategy<Value = Vector4<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| Vector4::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(q in arb_quat(), ls in prop::array::uniform3(-2.0..2.0f64)) {
            let ls = Vector3::from(ls);
            let cov = compose_covariance(&q, &ls);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut expected: Vec<f64> = ls.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, x) in eig.iter().zip(&expected) {
                prop_assert!((e - x).abs() <= 1e-9 * x.max(1.0));
            }
        }

        #[test]
        fn sh_is_affine_in_coefficients(
            a in -2.0..2.0f64, b in -2.0..2.0f64,
            c1 in prop::collection::vec(-1.0..1.0f64, 48),
            c2 in prop::collection::vec(-1.0..1.0f64, 48),
            dir in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let d = Vector3::from(dir);
            prop_assume!(d.norm() > 1e-3);
            let d = d.normalize();
            let to_coeffs = |c: &[f64]| c.chunks(3).map(|v| Vector3::new(v[0], v[1], v[2])).collect::<Vec<_>>();
            let (k1, k2) = (to_coeffs(&c1), to_coeffs(&c2));
            let mix: Vec<_> = k1.iter().zip(&k2).map(|(x, y)| x * a + y * b).collect();
            let lhs = eval_sh(&mix, &d).unwrap();
            let rhs = eval_sh(&k1, &d).unwrap() * a + eval_sh(&k2, &d).unwrap() * b
                - Vector3::repeat((a + b - 1.0) * 0.5);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn renormalizing_a_unit_quaternion_is_identity(q in arb_quat()) {
            let unit = normalize_quat(&q);
            prop_assert!((normalize_quat(&unit) - unit).amax() < 1e-12);
        }
    }
}
