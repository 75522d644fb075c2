//! Scene editing on reconstructed clouds: reflecting the front sub-cloud,
//! inserting a rigidly transformed cloud, and tiling a new mirror surface.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::mirror::MirrorPlane;
use crate::model::sh::num_coeffs;
use crate::model::{logit, Gaussian, GaussianCloud, LABEL_SATURATION_EPS};

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From a quaternion in (w, x, y, z) order, normalized here.
    pub fn from_parts(quat_wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let [w, x, y, z] = quat_wxyz;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !(n > 1e-12 && n.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("invalid rigid transform {quat_wxyz:?} {translation:?}")));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: Vector3::from(translation),
        })
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Moves the mean and turns the frame. SH coefficients are not rotated,
    /// so view-dependent color keeps its world orientation.
    pub fn apply_gaussian(&self, g: &Gaussian) -> Gaussian {
        let q = g.rotation;
        let own = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let turned = (self.rotation * own).into_inner();
        Gaussian {
            mean: self.apply_point(&g.mean),
            rotation: Vector4::new(turned.w, turned.i, turned.j, turned.k),
            ..g.clone()
        }
    }
}

/// The mirrored front sub-cloud, and the plane with its orientation flipped
/// so that the mirrored Gaussians are on its front side. Reflecting the
/// result across the returned plane gives back the original front sub-cloud.
pub fn reflect_front(cloud: &GaussianCloud, plane: &MirrorPlane) -> Result<(GaussianCloud, MirrorPlane)> {
    let mirrored = plane.reflect_cloud(cloud)?;
    Ok((mirrored, MirrorPlane::new(-plane.normal, -plane.offset)))
}

/// Copies `g` with its SH coefficients padded with zeros or truncated to
/// `degree`.
fn with_sh_degree(g: &Gaussian, degree: usize) -> Gaussian {
    let mut out = g.clone();
    out.sh.resize(num_coeffs(degree), Vector3::zeros());
    out
}

/// `a` followed by `b` moved by `transform`. The result uses the higher of
/// the two SH degrees.
pub fn merge(a: &GaussianCloud, b: &GaussianCloud, transform: &RigidTransform) -> GaussianCloud {
    let degree = a.sh_degree.max(b.sh_degree);
    let mut out = GaussianCloud::new(degree);
    out.gaussians.extend(a.gaussians.iter().map(|g| with_sh_degree(g, degree)));
    out.gaussians
        .extend(b.gaussians.iter().map(|g| with_sh_degree(&transform.apply_gaussian(g), degree)));
    out
}

/// A rectangular patch on a plane, given by its center and half extents
/// along two in-plane axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorPatch {
    pub center: Vector3<f64>,
    pub half_extent: (f64, f64),
    /// Grid spacing; the Gaussians get in-plane scale `0.75 * spacing`.
    pub spacing: f64,
    pub opacity: f64,
}

/// In-plane axes (u, v) with `u x v = n / |n|`. `u` is built from the
/// coordinate axis least aligned with the normal.
pub fn plane_axes(plane: &MirrorPlane) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let n = plane.normalized()?.normal;
    let k = n.iamin();
    let e = Vector3::ith(k, 1.0);
    let u = e.cross(&n).normalize();
    let v = n.cross(&u);
    Ok((u, v))
}

/// Mirror-labelled flat Gaussians tiling `patch`, projected onto the plane
/// and kept on its back side so that they are never reflected themselves.
pub fn mirror_surface(plane: &MirrorPlane, patch: &MirrorPatch, sh_degree: usize) -> Result<GaussianCloud> {
    let unit = plane.normalized()?;
    if !(patch.spacing > 0.0) || !(patch.half_extent.0 >= 0.0 && patch.half_extent.1 >= 0.0) {
        return Err(Error::Usage(format!(
            "mirror patch needs a positive spacing and non-negative extents, got spacing {} extents {:?}",
            patch.spacing, patch.half_extent
        )));
    }
    if !(patch.opacity > 0.0 && patch.opacity < 1.0) {
        return Err(Error::Usage(format!("mirror opacity must be in (0, 1), got {}", patch.opacity)));
    }
    let (u, v) = plane_axes(&unit)?;
    let n = unit.normal;
    let center = patch.center - n * (n.dot(&patch.center) + unit.offset);
    let rotation = {
        let r = nalgebra::Matrix3::from_columns(&[u, v, n]);
        crate::model::matrix_to_quat(&r)
    };
    let sigma = 0.75 * patch.spacing;
    let log_scale = Vector3::new(sigma.ln(), sigma.ln(), (0.1 * sigma).ln());
    let nu = (patch.half_extent.0 / patch.spacing + 1e-9).floor() as i64;
    let nv = (patch.half_extent.1 / patch.spacing + 1e-9).floor() as i64;
    let mut cloud = GaussianCloud::new(sh_degree);
    for j in -nv..=nv {
        for i in -nu..=nu {
            let mut mean = center + u * (i as f64 * patch.spacing) + v * (j as f64 * patch.spacing);
            let d = n.dot(&mean) + unit.offset;
            if d >= 0.0 {
                mean -= n * (d + f64::EPSILON * (1.0 + mean.norm()));
            }
            let mut g = Gaussian::with_color(mean, log_scale, patch.opacity, Vector3::zeros(), sh_degree);
            g.rotation = rotation;
            g.label_logit = logit(LABEL_SATURATION_EPS);
            cloud.gaussians.push(g);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compose_covariance;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample_cloud() -> GaussianCloud {
        let mut cloud = GaussianCloud::new(1);
        for (i, z) in [0.5, -0.3, 1.2, 2.0].iter().enumerate() {
            let mut g = Gaussian::with_color(
                Vector3::new(0.1 * i as f64, -0.2, *z),
                Vector3::new(-2.0, -1.5, -2.5),
                0.6,
                Vector3::new(0.2, 0.5, 0.7),
                1,
            );
            g.rotation = Vector4::new(0.9, 0.1 * i as f64, -0.3, 0.2).normalize();
            cloud.gaussians.push(g);
        }
        cloud
    }

    #[test]
    fn reflecting_twice_restores_the_front_subcloud() {
        let cloud = sample_cloud();
        let plane = MirrorPlane::new(Vector3::new(0.1, 0.2, 1.0), -0.1);
        let (once, flipped) = reflect_front(&cloud, &plane).unwrap();
        assert_eq!(once.len(), 3);
        let (twice, back) = reflect_front(&once, &flipped).unwrap();
        assert_eq!(back, plane);
        let front = plane.filter_front(&cloud).unwrap();
        assert_eq!(twice.len(), front.len());
        for (a, b) in twice.gaussians.iter().zip(&front.gaussians) {
            assert!((a.mean - b.mean).norm() <= 1e-6);
            let (ca, cb) = (compose_covariance(&a.rotation, &a.log_scale), compose_covariance(&b.rotation, &b.log_scale));
            assert!((ca - cb).norm() <= 1e-6 * cb.norm());
            assert_eq!(a.sh, b.sh);
            assert_eq!(a.opacity_logit, b.opacity_logit);
        }
    }

    #[test]
    fn identity_merge_concatenates() {
        let a = sample_cloud();
        let mut b = GaussianCloud::new(0);
        b.gaussians.push(Gaussian::with_color(Vector3::x(), Vector3::zeros(), 0.5, Vector3::repeat(0.5), 0));
        let m = merge(&a, &b, &RigidTransform::identity());
        assert_eq!(m.len(), a.len() + b.len());
        assert_eq!(m.sh_degree, 1);
        assert_eq!(&m.gaussians[..4], &a.gaussians[..]);
        assert_eq!(m.gaussians[4].mean, Vector3::x());
        assert_eq!(m.gaussians[4].sh.len(), 4);
        m.validate().unwrap();
    }

    #[test]
    fn rigid_transform_moves_mean_and_covariance() {
        let g = &sample_cloud().gaussians[1];
        let t = RigidTransform::from_parts([0.8, 0.2, -0.4, 0.1], [1.0, -2.0, 0.5]).unwrap();
        let moved = t.apply_gaussian(g);
        let r = t.rotation.to_rotation_matrix().into_inner();
        assert_relative_eq!(moved.mean, r * g.mean + Vector3::new(1.0, -2.0, 0.5), epsilon = 1e-12);
        let expected = r * compose_covariance(&g.rotation, &g.log_scale) * r.transpose();
        assert_relative_eq!(compose_covariance(&moved.rotation, &moved.log_scale), expected, epsilon = 1e-12);
        assert!(RigidTransform::from_parts([0.0; 4], [0.0; 3]).is_err());
    }

    #[test]
    fn mirror_patch_lies_on_the_back_side_of_the_plane() {
        let plane = MirrorPlane::new(Vector3::new(0.3, -0.2, 0.9), 0.4);
        let patch = MirrorPatch {
            center: Vector3::new(0.5, 0.5, 0.5),
            half_extent: (0.5, 0.3),
            spacing: 0.1,
            opacity: 0.9,
        };
        let cloud = mirror_surface(&plane, &patch, 2).unwrap();
        assert_eq!(cloud.len(), 11 * 7);
        assert!(plane.front_indices(&cloud).unwrap().is_empty());
        for g in &cloud.gaussians {
            assert!(plane.signed_distance(&g.mean).unwrap().abs() < 1e-9);
            assert!(g.label() < 1e-3);
            // Thin axis along the normal.
            let cov = compose_covariance(&g.rotation, &g.log_scale);
            let n = plane.normal.normalize();
            assert_relative_eq!(n.dot(&(cov * n)), (0.0075f64).powi(2), epsilon = 1e-12);
        }
        assert!(mirror_surface(&plane, &MirrorPatch { spacing: 0.0, ..patch }, 0).is_err());
    }

    fn arb_vec(r: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rigid_transforms_preserve_distances_and_shape(
            q in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_filter("nonzero", |q| q.0.abs() + q.1.abs() + q.2.abs() + q.3.abs() > 0.1),
            t in arb_vec(5.0),
            a in arb_vec(3.0),
            b in arb_vec(3.0),
            log_scale in arb_vec(2.0),
        ) {
            let transform = RigidTransform::from_parts([q.0, q.1, q.2, q.3], [t.x, t.y, t.z]).unwrap();
            let d0 = (a - b).norm();
            let d1 = (transform.apply_point(&a) - transform.apply_point(&b)).norm();
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
            let g = Gaussian::with_color(a, log_scale, 0.5, Vector3::repeat(0.5), 0);
            let moved = transform.apply_gaussian(&g);
            let c0 = compose_covariance(&g.rotation, &g.log_scale);
            let c1 = compose_covariance(&moved.rotation, &moved.log_scale);
            prop_assert!((c0.trace() - c1.trace()).abs() <= 1e-9 * c0.trace());
            prop_assert!((c0.determinant() - c1.determinant()).abs() <= 1e-9 * c0.determinant().abs().max(1e-300));
        }

        #[test]
        fn merge_keeps_every_gaussian(n_a in 0usize..5, n_b in 0usize..5, deg_a in 0usize..4, deg_b in 0usize..4) {
            let cloud = |n: usize, deg: usize| {
                let mut c = GaussianCloud::new(deg);
                for i in 0..n {
                    c.gaussians.push(Gaussian::with_color(Vector3::repeat(i as f64), Vector3::zeros(), 0.5, Vector3::repeat(0.5), deg));
                }
                c
            };
            let m = merge(&cloud(n_a, deg_a), &cloud(n_b, deg_b), &RigidTransform::identity());
            prop_assert_eq!(m.len(), n_a + n_b);
            prop_assert!(m.validate().is_ok());
        }
    }
}
