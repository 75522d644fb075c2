//! Optimizer state and the transitions between stages.

use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mirror::MirrorPlane;
use crate::model::sh::{num_coeffs, rgb_to_dc};
use crate::model::{logit, saturated_label_logit, Gaussian, GaussianCloud};
use crate::plane_estimation::SfmPointCloud;
use crate::raster::SceneGrads;

use super::adam::{AdamStep, GaussianMoments, PlaneMoments};
use super::config::TrainingConfig;

/// Initial opacity of Gaussians created from SfM points.
pub const INITIAL_OPACITY: f64 = 0.1;

/// Lower bound on the squared neighbour distance used for initial scales.
const MIN_NEIGHBOUR_DIST2: f64 = 1e-7;

/// RNG streams derived from the training seed.
pub(crate) const STREAM_VIEWS: u64 = 1;
pub(crate) const STREAM_DENSIFY: u64 = 2;
pub(crate) const STREAM_LABELS: u64 = 3;

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    One = 1,
    Two = 2,
    Three = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub cloud: GaussianCloud,
    pub plane: Option<MirrorPlane>,
    pub stage: Stage,
    /// Steps completed in the current stage.
    pub step: usize,
    pub scene_scale: f64,
    pub(crate) moments: Vec<GaussianMoments>,
    /// Adam step count shared by all Gaussian parameters.
    pub(crate) gaussian_t: u64,
    pub(crate) plane_moments: PlaneMoments,
    /// Summed screen-space gradient norms and view counts since the last densification.
    pub(crate) grad_accum: Vec<f64>,
    pub(crate) grad_count: Vec<u32>,
    pub(crate) densify_rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn new(cloud: GaussianCloud, scene_scale: f64, seed: u64) -> Result<Self> {
        cloud.validate()?;
        if !(scene_scale > 0.0 && scene_scale.is_finite()) {
            return Err(Error::Usage(format!("scene scale must be positive, got {scene_scale}")));
        }
        let n = cloud.len();
        let moments = cloud.gaussians.iter().map(|g| GaussianMoments::zeros(g.sh.len())).collect();
        Ok(Self {
            cloud,
            plane: None,
            stage: Stage::One,
            step: 0,
            scene_scale,
            moments,
            gaussian_t: 0,
            plane_moments: PlaneMoments::default(),
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            densify_rng: seeded_rng(seed, STREAM_DENSIFY),
        })
    }

    /// Moves to `stage`. Plane moments restart at every boundary; Gaussian
    /// moments carry over.
    pub fn enter_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.step = 0;
        self.plane_moments = PlaneMoments::default();
    }

    pub fn moments_len(&self) -> usize {
        self.moments.len()
    }

    /// Sets the plane, normalized to a unit normal.
    pub fn set_plane(&mut self, plane: MirrorPlane) -> Result<()> {
        self.plane = Some(plane.normalized()?);
        Ok(())
    }

    /// One Adam step on the plane parameters (n, b).
    pub(crate) fn adam_plane(&mut self, grad: &crate::mirror::PlaneGrad, lr: f64) -> Result<()> {
        let plane = self
            .plane
            .as_mut()
            .ok_or_else(|| Error::Usage("plane update without a plane".into()))?;
        let pm = &mut self.plane_moments;
        pm.t += 1;
        let step = AdamStep::new(pm.t);
        step.apply3(&mut plane.normal, &grad.normal, &mut pm.m.normal, &mut pm.v.normal, lr);
        step.apply(&mut plane.offset, grad.offset, &mut pm.m.offset, &mut pm.v.offset, lr);
        plane.check()
    }

    /// One Adam step on every Gaussian. `label_lr = None` leaves labels
    /// and their moments untouched.
    pub(crate) fn adam_gaussians(&mut self, grads: &SceneGrads, lr: &GaussianStepLr, label_lr: Option<f64>) {
        self.gaussian_t += 1;
        let step = AdamStep::new(self.gaussian_t);
        for ((g, gr), mo) in self.cloud.gaussians.iter_mut().zip(&grads.gaussians).zip(&mut self.moments) {
            step.apply3(&mut g.mean, &gr.mean, &mut mo.m.mean, &mut mo.v.mean, lr.position);
            step.apply4(&mut g.rotation, &gr.rotation, &mut mo.m.rotation, &mut mo.v.rotation, lr.rotation);
            step.apply3(&mut g.log_scale, &gr.log_scale, &mut mo.m.log_scale, &mut mo.v.log_scale, lr.scale);
            step.apply(&mut g.opacity_logit, gr.opacity_logit, &mut mo.m.opacity_logit, &mut mo.v.opacity_logit, lr.opacity);
            for (k, coeff) in g.sh.iter_mut().enumerate() {
                let rate = if k == 0 { lr.sh_dc } else { lr.sh_rest };
                step.apply3(coeff, &gr.sh[k], &mut mo.m.sh[k], &mut mo.v.sh[k], rate);
            }
            if let Some(rate) = label_lr {
                step.apply(&mut g.label_logit, gr.label_logit, &mut mo.m.label_logit, &mut mo.v.label_logit, rate);
            }
        }
    }

    /// Label initialization at the start of stage 3: Gaussians farther than
    /// `tau` from the plane become real (k = 1 - eps), the rest get a
    /// seeded uniform k in [0.05, 0.95].
    pub fn init_labels(&mut self, tau: f64, seed: u64) -> Result<()> {
        let plane = self
            .plane
            .ok_or_else(|| Error::Usage("label initialization needs a plane".into()))?;
        plane.check()?;
        let mut rng = seeded_rng(seed, STREAM_LABELS);
        for (g, mo) in self.cloud.gaussians.iter_mut().zip(&mut self.moments) {
            let d = plane.signed_distance(&g.mean)?.abs();
            // One draw per Gaussian keeps the sequence independent of the split.
            let u: f64 = rng.gen_range(0.05..0.95);
            g.label_logit = if d > tau { saturated_label_logit() } else { logit(u) };
            mo.m.label_logit = 0.0;
            mo.v.label_logit = 0.0;
        }
        Ok(())
    }
}

/// Per-group learning rates for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStepLr {
    pub position: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl GaussianStepLr {
    /// Rates at `position_step` of the `position_total` steps over which the
    /// position rate decays.
    pub fn at(config: &TrainingConfig, scene_scale: f64, position_step: usize, position_total: usize) -> Self {
        let lr = &config.lr;
        Self {
            position: lr.position.at(position_step, position_total) * scene_scale,
            sh_dc: lr.sh_dc,
            sh_rest: lr.sh_rest,
            opacity: lr.opacity,
            scale: lr.scale,
            rotation: lr.rotation,
        }
    }
}

/// Mean squared distance from every point to its `k` nearest other points.
pub fn mean_neighbour_dist2(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    if points.len() < 2 {
        return vec![f64::NAN; points.len()];
    }
    let tree = RTree::bulk_load(
        points
            .iter()
            .enumerate()
            .map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i))
            .collect(),
    );
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let found: Vec<f64> = tree
                .nearest_neighbor_iter_with_distance_2(&[p.x, p.y, p.z])
                .filter(|(n, _)| n.data != i)
                .take(k)
                .map(|(_, d2)| d2)
                .collect();
            found.iter().sum::<f64>() / found.len() as f64
        })
        .collect()
}

/// Isotropic Gaussians at the SfM points: scale from the three nearest
/// neighbours, opacity 0.1, DC color from the point color, real labels.
pub fn init_cloud_from_sfm(sfm: &SfmPointCloud, sh_degree: usize, scene_scale: f64) -> Result<GaussianCloud> {
    if sfm.points.is_empty() {
        return Err(Error::Usage("cannot initialize from an empty point cloud".into()));
    }
    if sfm.colors.len() != sfm.points.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points but {} colors",
            sfm.points.len(),
            sfm.colors.len()
        )));
    }
    let dist2 = mean_neighbour_dist2(&sfm.points, 3);
    let fallback = (0.01 * scene_scale).powi(2);
    let coeffs = num_coeffs(sh_degree);
    let mut cloud = GaussianCloud::new(sh_degree);
    for (i, p) in sfm.points.iter().enumerate() {
        let d2 = if dist2[i].is_finite() { dist2[i].max(MIN_NEIGHBOUR_DIST2) } else { fallback };
        let mut sh = vec![Vector3::zeros(); coeffs];
        sh[0] = rgb_to_dc(&sfm.colors[i]);
        cloud.gaussians.push(Gaussian {
            mean: *p,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(0.5 * d2.ln()),
            opacity_logit: logit(INITIAL_OPACITY),
            sh,
            label_logit: saturated_label_logit(),
        });
    }
    cloud.validate()?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::model::LABEL_SATURATION_EPS;

    fn state_with_means(means: &[Vector3<f64>]) -> TrainingState {
        let mut cloud = GaussianCloud::new(0);
        for m in means {
            cloud.gaussians.push(Gaussian::with_color(*m, Vector3::repeat(0.05f64.ln()), 0.5, Vector3::repeat(0.5), 0));
        }
        let mut s = TrainingState::new(cloud, 1.0, 0).unwrap();
        s.set_plane(MirrorPlane::new(Vector3::z(), 0.0)).unwrap();
        s
    }

    #[test]
    fn label_threshold_rule() {
        let mut s = state_with_means(&[Vector3::new(0.0, 0.0, 0.2), Vector3::new(1.0, 0.0, 0.05), Vector3::new(0.0, 1.0, -0.3)]);
        s.init_labels(0.1, 3).unwrap();
        let k: Vec<f64> = s.cloud.gaussians.iter().map(|g| g.label()).collect();
        assert!(k[0] >= 0.9999 && k[2] >= 0.9999, "{k:?}");
        assert!((0.05..=0.95).contains(&k[1]), "{k:?}");
        assert_relative_eq!(k[0], 1.0 - LABEL_SATURATION_EPS, epsilon = 1e-12);

        let mut again = state_with_means(&[Vector3::new(0.0, 0.0, 0.2), Vector3::new(1.0, 0.0, 0.05), Vector3::new(0.0, 1.0, -0.3)]);
        again.init_labels(0.1, 3).unwrap();
        assert_eq!(again.cloud.gaussians[1].label_logit, s.cloud.gaussians[1].label_logit);
    }

    #[test]
    fn zero_tau_randomizes_all_but_exact_zero_distances() {
        let mut s = state_with_means(&[Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1e-9), Vector3::new(0.0, 0.0, 2.0)]);
        s.init_labels(0.0, 1).unwrap();
        let k: Vec<f64> = s.cloud.gaussians.iter().map(|g| g.label()).collect();
        assert!((0.05..=0.95).contains(&k[0]));
        assert!(k[1] > 0.999 && k[2] > 0.999);
    }

    #[test]
    fn neighbour_distances_match_brute_force() {
        let mut rng = seeded_rng(5, 0);
        let mut pts: Vec<Vector3<f64>> = (0..200).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        // Coplanar duplicates stress the tree's bucket splitting.
        pts.extend((0..100).map(|i| Vector3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0)));
        let fast = mean_neighbour_dist2(&pts, 3);
        for (i, p) in pts.iter().enumerate() {
            let mut d: Vec<f64> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| (p - q).norm_squared()).collect();
            d.sort_by(f64::total_cmp);
            let brute = d[..3].iter().sum::<f64>() / 3.0;
            assert_relative_eq!(fast[i], brute, max_relative = 1e-12);
        }
    }

    #[test]
    fn sfm_initialization() {
        let sfm = SfmPointCloud {
            points: vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()],
            colors: vec![Vector3::new(1.0, 0.0, 0.5); 4],
            observations: vec![Vec::new(); 4],
        };
        let cloud = init_cloud_from_sfm(&sfm, 2, 1.0).unwrap();
        assert_eq!(cloud.len(), 4);
        assert_eq!(cloud.gaussians[0].sh.len(), 9);
        assert_relative_eq!(cloud.gaussians[0].opacity(), INITIAL_OPACITY, epsilon = 1e-12);
        // The origin's three neighbours are all at distance 1.
        assert_relative_eq!(cloud.gaussians[0].scale(), Vector3::repeat(1.0), epsilon = 1e-12);
        let color = crate::model::eval_sh(&cloud.gaussians[0].sh, &Vector3::z()).unwrap();
        assert_relative_eq!(color, Vector3::new(1.0, 0.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn plane_step_moves_against_gradient() {
        let mut s = state_with_means(&[Vector3::zeros()]);
        let grad = crate::mirror::PlaneGrad { normal: Vector3::new(0.3, -0.2, 0.0), offset: 0.5 };
        s.adam_plane(&grad, 0.01).unwrap();
        let p = s.plane.unwrap();
        assert_relative_eq!(p.normal, Vector3::new(-0.01, 0.01, 1.0), epsilon = 1e-9);
        assert_relative_eq!(p.offset, -0.01, epsilon = 1e-9);
    }
}
