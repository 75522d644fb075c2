//! Initial mirror plane from SfM points and per-image mirror masks: border
//! extraction, point collection, outlier removal and RANSAC.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};
use crate::mirror::MirrorPlane;

/// One 2D sighting of an SfM point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SfmPointCloud {
    pub points: Vec<Vector3<f64>>,
    /// RGB in [0, 1], parallel to `points`.
    pub colors: Vec<Vector3<f64>>,
    pub observations: Vec<Vec<Observation>>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneEstimationConfig {
    pub dilation_radius: usize,
    pub knn: usize,
    pub std_factor: f64,
    pub ransac_iterations: usize,
    /// Inlier threshold as a fraction of the border-point bounding-box diagonal.
    pub inlier_fraction: f64,
}

impl Default for PlaneEstimationConfig {
    fn default() -> Self {
        Self {
            dilation_radius: 2,
            knn: 10,
            std_factor: 2.0,
            ransac_iterations: 1000,
            inlier_fraction: 0.01,
        }
    }
}

/// Pixel set over an image grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorderMap {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl BorderMap {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.bits[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Member pixels in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (0..self.bits.len())
            .filter(|i| self.bits[*i])
            .map(|i| (i % self.width, i / self.width))
            .collect()
    }
}

fn neighbors(x: usize, y: usize, r: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    (y0..=y1).flat_map(move |j| (x0..=x1).map(move |i| (i, j)))
}

/// Mirror-side boundary pixels (mirror pixels with an 8-connected
/// non-mirror neighbor), thickened by `dilation_radius` with a square
/// structuring element. Pixels outside the image do not count as a
/// different class.
pub fn extract_mask_border(mask: &ImageBuf, dilation_radius: usize) -> BorderMap {
    let (w, h) = (mask.width, mask.height);
    let mirror = |x: usize, y: usize| mask.get(x, y, 0) < 0.5;
    let mut edge = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if mirror(x, y) && neighbors(x, y, 1, w, h).any(|(i, j)| !mirror(i, j)) {
                edge[y * w + x] = true;
            }
        }
    }
    let mut bits = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if edge[y * w + x] {
                for (i, j) in neighbors(x, y, dilation_radius, w, h) {
                    bits[j * w + i] = true;
                }
            }
        }
    }
    BorderMap { width: w, height: h, bits }
}

/// Indices of SfM points with at least one observation on a mask border.
pub fn collect_border_indices(sfm: &SfmPointCloud, masks: &[ImageBuf], radius: usize) -> Result<Vec<usize>> {
    let borders: Vec<BorderMap> = masks.par_iter().map(|m| extract_mask_border(m, radius)).collect();
    let mut out = Vec::new();
    for (i, obs) in sfm.observations.iter().enumerate() {
        let mut hit = false;
        for o in obs {
            let border = borders.get(o.frame).ok_or_else(|| {
                Error::DimensionMismatch(format!("point {i} observed in frame {} but only {} masks", o.frame, borders.len()))
            })?;
            let (px, py) = (o.pixel.x.floor(), o.pixel.y.floor());
            if px < 0.0 || py < 0.0 || px >= border.width as f64 || py >= border.height as f64 {
                return Err(Error::DimensionMismatch(format!(
                    "point {i} observation ({}, {}) lies outside frame {}",
                    o.pixel.x, o.pixel.y, o.frame
                )));
            }
            hit |= border.contains(px as usize, py as usize);
        }
        if hit {
            out.push(i);
        }
    }
    Ok(out)
}

pub fn collect_border_points(sfm: &SfmPointCloud, masks: &[ImageBuf], radius: usize) -> Result<Vec<Vector3<f64>>> {
    Ok(collect_border_indices(sfm, masks, radius)?.into_iter().map(|i| sfm.points[i]).collect())
}

/// Statistical outlier removal on mean k-NN distance.
pub fn remove_flying_points(points: &[Vector3<f64>], k: usize, std_factor: f64) -> Vec<Vector3<f64>> {
    if points.len() <= k || k == 0 {
        log::warn!("{} points are too few for {k}-nn outlier removal; keeping all", points.len());
        return points.to_vec();
    }
    let mean_knn: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    let n = mean_knn.len() as f64;
    let mu = mean_knn.iter().sum::<f64>() / n;
    let sd = (mean_knn.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mu + std_factor * sd;
    points.iter().zip(&mean_knn).filter(|(_, d)| **d <= limit).map(|(p, _)| *p).collect()
}

pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub plane: MirrorPlane,
    /// Indices of the inliers of the best hypothesis.
    pub inliers: Vec<usize>,
}

/// Total-least-squares plane (unit normal) through the given points.
pub fn fit_plane_least_squares(points: &[Vector3<f64>]) -> Result<MirrorPlane> {
    if points.len() < 3 {
        return Err(Error::FitFailure(format!("{} points cannot define a plane", points.len())));
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let n = eig.eigenvectors.column(imin).into_owned().normalize();
    Ok(MirrorPlane::through(&c, n))
}

/// Orients the normal so that most camera centers are on the positive side;
/// without cameras (or on a tie) the largest normal component is made positive.
pub fn orient_plane(plane: &MirrorPlane, camera_centers: &[Vector3<f64>]) -> MirrorPlane {
    let (mut pos, mut neg) = (0usize, 0usize);
    for c in camera_centers {
        let s = plane.normal.dot(c) + plane.offset;
        if s > 0.0 {
            pos += 1;
        } else if s < 0.0 {
            neg += 1;
        }
    }
    let flip = if pos != neg {
        neg > pos
    } else {
        let n = plane.normal;
        let i = n.iamax();
        n[i] < 0.0
    };
    if flip {
        MirrorPlane::new(-plane.normal, -plane.offset)
    } else {
        *plane
    }
}

fn count_inliers(points: &[Vector3<f64>], plane: &MirrorPlane, threshold: f64) -> usize {
    points.iter().filter(|p| (plane.normal.dot(p) + plane.offset).abs() <= threshold).count()
}

/// RANSAC with per-iteration RNG streams derived from `seed`, then a
/// least-squares refit on the inliers of the best hypothesis.
pub fn ransac_fit_plane(
    points: &[Vector3<f64>],
    iterations: usize,
    inlier_threshold: f64,
    seed: u64,
    camera_centers: &[Vector3<f64>],
) -> Result<PlaneFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::FitFailure(format!("{n} points cannot define a plane")));
    }
    let scale = bbox_diagonal(points).max(f64::MIN_POSITIVE);
    let best = (0..iterations.max(1))
        .into_par_iter()
        .filter_map(|it| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(it as u64);
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.gen_range(0..n - 2);
            for m in [a.min(b), a.max(b)] {
                if c >= m {
                    c += 1;
                }
            }
            let normal = (points[b] - points[a]).cross(&(points[c] - points[a]));
            let len = normal.norm();
            if len <= 1e-12 * scale * scale {
                return None;
            }
            let plane = MirrorPlane::through(&points[a], normal / len);
            Some((count_inliers(points, &plane, inlier_threshold), it, plane))
        })
        .reduce_with(|x, y| if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x });
    let Some((_, _, hypothesis)) = best else {
        return Err(Error::FitFailure("every sampled triple was degenerate".into()));
    };
    let inliers: Vec<usize> = (0..n)
        .filter(|&i| (hypothesis.normal.dot(&points[i]) + hypothesis.offset).abs() <= inlier_threshold)
        .collect();
    let inlier_points: Vec<Vector3<f64>> = inliers.iter().map(|&i| points[i]).collect();
    let refined = if inlier_points.len() >= 3 {
        fit_plane_least_squares(&inlier_points)?
    } else {
        hypothesis
    };
    Ok(PlaneFit {
        plane: orient_plane(&refined, camera_centers),
        inliers,
    })
}

/// Border points, outlier removal and RANSAC in one call.
pub fn estimate_plane(
    sfm: &SfmPointCloud,
    masks: &[ImageBuf],
    camera_centers: &[Vector3<f64>],
    config: &PlaneEstimationConfig,
    seed: u64,
) -> Result<PlaneFit> {
    let border = collect_border_points(sfm, masks, config.dilation_radius)?;
    if border.is_empty() {
        return Err(Error::FitFailure("no SfM point lies on a mirror border".into()));
    }
    let kept = remove_flying_points(&border, config.knn, config.std_factor);
    let threshold = config.inlier_fraction * bbox_diagonal(&kept);
    log::info!("plane estimation: {} border points, {} after outlier removal", border.len(), kept.len());
    ransac_fit_plane(&kept, config.ransac_iterations, threshold, seed, camera_centers)
}
