//! Deterministic synthetic mirror scenes and an independent per-pixel
//! reference renderer.
//!
//! The scene is a textured floor of flat Gaussians lying on the plane
//! `z = 0`, with a rectangular mirror cut out of it (tiled by flat
//! Gaussians labelled as mirror surface), a handful of free-floating
//! "object" Gaussians above the floor, a textured backdrop wall beyond the
//! mirror that is mostly seen through its reflection, and a ring of cameras
//! looking down at the mirror. Objects are placed so that they never hide the mirror from any
//! camera, which keeps the ground-truth mask exactly the projected rectangle.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::buffer::ImageBuf;
use crate::error::Result;
use crate::io::manifest::default_split;
use crate::io::{save_checkpoint, write_scene, FrameData, Scene};
use crate::mirror::MirrorPlane;
use crate::model::{eval_sh, logit, Camera, Gaussian, GaussianCloud, LABEL_SATURATION_EPS};
use crate::plane_estimation::{Observation, SfmPointCloud};

/// Axis-aligned rectangle in the mirror plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorRect {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl MirrorRect {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        d.dot(&self.axis_u).abs() <= self.half_u && d.dot(&self.axis_v).abs() <= self.half_v
    }

    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let (u, v) = (self.axis_u * self.half_u, self.axis_v * self.half_v);
        [self.center - u - v, self.center + u - v, self.center + u + v, self.center - u + v]
    }

    /// Whether the ray `origin + t dir`, `t > 0`, crosses the rectangle.
    pub fn hit(&self, plane: &MirrorPlane, origin: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
        let denom = plane.normal.dot(dir);
        if denom.abs() < 1e-15 {
            return false;
        }
        let t = -(plane.normal.dot(origin) + plane.offset) / denom;
        t > 0.0 && self.contains(&(origin + dir * t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRing {
    pub count: usize,
    /// Horizontal distance of the cameras from `target`.
    pub radius: f64,
    /// Height above the mirror plane.
    pub height: f64,
    pub target: Vector3<f64>,
    /// Azimuth range in radians, cameras spread evenly over it.
    pub azimuth: (f64, f64),
    pub focal: f64,
    pub width: usize,
    pub image_height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub ring: CameraRing,
    pub mirror_half_extent: (f64, f64),
    pub floor_half_extent: f64,
    pub floor_spacing: f64,
    pub mirror_spacing: f64,
    /// Opacity of the mirror-surface Gaussians. A mirror has almost no
    /// appearance of its own; these Gaussians mainly provide SfM points on
    /// the mirror and the label-0 region.
    pub mirror_opacity: f64,
    /// Bounds of the object box: (min, max).
    pub object_box: (Vector3<f64>, Vector3<f64>),
    pub object_scale: (f64, f64),
    /// Keep-out margin, in pixels, between objects and the mirror outline.
    pub occlusion_margin_px: f64,
    pub with_mirror: bool,
    pub backdrop: Option<Backdrop>,
}

/// Vertical wall of flat Gaussians in the plane `x = x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backdrop {
    pub x: f64,
    pub half_width: f64,
    pub height: f64,
    pub spacing: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            ring: CameraRing {
                count: 12,
                radius: 2.2,
                height: 3.5,
                target: Vector3::new(0.1, 0.0, 0.0),
                azimuth: (150f64.to_radians(), 210f64.to_radians()),
                focal: 90.0,
                width: 64,
                image_height: 64,
            },
            mirror_half_extent: (0.8, 0.6),
            floor_half_extent: 3.4,
            floor_spacing: 0.2,
            mirror_spacing: 0.1,
            mirror_opacity: 0.1,
            object_box: (Vector3::new(0.9, -0.7, 0.3), Vector3::new(1.6, 0.7, 0.9)),
            object_scale: (0.05, 0.12),
            occlusion_margin_px: 2.0,
            with_mirror: true,
            backdrop: Some(Backdrop {
                x: 2.0,
                half_width: 3.0,
                height: 4.0,
                spacing: 0.25,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cloud: GaussianCloud,
    pub plane: MirrorPlane,
    pub mirror: Option<MirrorRect>,
    pub cameras: Vec<Camera>,
    pub ring: CameraRing,
    pub sfm: SfmPointCloud,
    /// Cloud indices of the free-floating objects.
    pub objects: Range<usize>,
    /// Cloud indices of the mirror-surface Gaussians.
    pub mirror_surface: Range<usize>,
    pub backdrop: Range<usize>,
    pub scene_scale: f64,
}

pub fn generate_scene(seed: u64, gaussian_count: usize, camera_count: usize) -> SyntheticScene {
    generate_scene_with(&SyntheticConfig::default(), seed, gaussian_count, camera_count)
}

fn ring_cameras(ring: &CameraRing, count: usize) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            let phi = ring.azimuth.0 + t * (ring.azimuth.1 - ring.azimuth.0);
            let eye = ring.target + Vector3::new(ring.radius * phi.cos(), ring.radius * phi.sin(), ring.height);
            Camera::look_at(eye, ring.target, Vector3::z(), ring.focal, ring.width, ring.image_height)
        })
        .collect()
}

fn floor_color(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.55 + 0.3 * (2.1 * p.x + 0.3).sin(),
        0.5 + 0.3 * (1.7 * p.y).cos(),
        0.45 + 0.25 * (1.3 * (p.x + p.y)).sin(),
    )
}

const FLAT_OPACITY: f64 = 0.98;

fn wall_color(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 + 0.4 * (2.3 * p.y + 1.1 * p.z).sin(),
        0.5 + 0.35 * (1.9 * p.z).cos(),
        0.5 + 0.4 * (1.5 * p.y - 2.2 * p.z + 0.7).sin(),
    )
}

fn flat_gaussian(mean: Vector3<f64>, sigma: f64, rgb: Vector3<f64>, label: f64) -> Gaussian {
    let mut g = Gaussian::with_color(mean, Vector3::new(sigma.ln(), sigma.ln(), (0.1 * sigma).ln()), FLAT_OPACITY, rgb, 0);
    g.label_logit = logit(label);
    g
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    // Shoemake's uniform rotation sampling.
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Vector4::new(b * (2.0 * PI * u3).cos(), a * (2.0 * PI * u2).sin(), a * (2.0 * PI * u2).cos(), b * (2.0 * PI * u3).sin())
}

/// Screen-space distance from `p` to a convex polygon; negative inside.
fn polygon_distance(p: &Vector2<f64>, poly: &[Vector2<f64>]) -> f64 {
    let mut inside = true;
    let mut best = f64::INFINITY;
    let area: f64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.x * b.y - a.y * b.x
        })
        .sum();
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let e = b - a;
        let cross = e.x * (p.y - a.y) - e.y * (p.x - a.x);
        if cross * area < 0.0 {
            inside = false;
        }
        let t = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        best = best.min((p - (a + e * t)).norm());
    }
    if inside {
        -best
    } else {
        best
    }
}

fn hides_mirror(mean: &Vector3<f64>, sigma_max: f64, rect: &MirrorRect, cameras: &[Camera], margin: f64) -> bool {
    cameras.iter().any(|cam| {
        let Some(c) = cam.project(mean) else {
            return true;
        };
        let depth = cam.to_camera(mean).z;
        let r = 3.0 * sigma_max * cam.fx / depth;
        let poly: Option<Vec<Vector2<f64>>> = rect.corners().iter().map(|q| cam.project(q)).collect();
        match poly {
            Some(poly) => polygon_distance(&c, &poly) <= r + margin,
            None => true,
        }
    })
}

pub fn generate_scene_with(config: &SyntheticConfig, seed: u64, gaussian_count: usize, camera_count: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = MirrorPlane::new(Vector3::z(), 0.0);
    let rect = MirrorRect {
        center: Vector3::zeros(),
        axis_u: Vector3::x(),
        axis_v: Vector3::y(),
        half_u: config.mirror_half_extent.0,
        half_v: config.mirror_half_extent.1,
    };
    let cameras = ring_cameras(&config.ring, camera_count);
    let real = 1.0 - LABEL_SATURATION_EPS;
    let mut cloud = GaussianCloud::new(0);

    let s = config.floor_spacing;
    let n = (config.floor_half_extent / s).round() as i64;
    for j in -n..=n {
        for i in -n..=n {
            let p = Vector3::new(i as f64 * s, j as f64 * s, 0.0);
            if config.with_mirror && rect.contains(&p) {
                continue;
            }
            cloud.gaussians.push(flat_gaussian(p, 0.75 * s, floor_color(&p), real));
        }
    }

    let start = cloud.len();
    if config.with_mirror {
        let m = config.mirror_spacing;
        let nu = (rect.half_u / m).floor() as i64;
        let nv = (rect.half_v / m).floor() as i64;
        for j in -nv..=nv {
            for i in -nu..=nu {
                let p = rect.center + rect.axis_u * (i as f64 * m) + rect.axis_v * (j as f64 * m);
                let mut g = flat_gaussian(p, 0.75 * m, Vector3::repeat(0.3), LABEL_SATURATION_EPS);
                g.opacity_logit = logit(config.mirror_opacity);
                cloud.gaussians.push(g);
            }
        }
    }
    let mirror_surface = start..cloud.len();

    let start = cloud.len();
    let (lo, hi) = config.object_box;
    for _ in 0..gaussian_count {
        loop {
            let mean = Vector3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
            let scale = Vector3::from_fn(|_, _| rng.gen_range(config.object_scale.0..config.object_scale.1));
            let rotation = random_unit_quat(&mut rng);
            let rgb = Vector3::from_fn(|_, _| rng.gen_range(0.1..0.9));
            let opacity = rng.gen_range(0.75..0.95);
            if config.with_mirror && hides_mirror(&mean, scale.max(), &rect, &cameras, config.occlusion_margin_px) {
                continue;
            }
            let mut g = Gaussian::with_color(mean, scale.map(f64::ln), opacity, rgb, 0);
            g.rotation = rotation;
            g.label_logit = logit(real);
            cloud.gaussians.push(g);
            break;
        }
    }
    let objects = start..cloud.len();

    let start = cloud.len();
    if let Some(wall) = &config.backdrop {
        // Quarter turn about y: the thin axis points along x.
        let turn = Vector4::new(std::f64::consts::FRAC_1_SQRT_2, 0.0, std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let ny = (wall.half_width / wall.spacing).floor() as i64;
        let nz = (wall.height / wall.spacing).floor() as i64;
        for k in 0..=nz {
            for j in -ny..=ny {
                let p = Vector3::new(wall.x, j as f64 * wall.spacing, k as f64 * wall.spacing);
                let mut g = flat_gaussian(p, 0.75 * wall.spacing, wall_color(&p), real);
                g.rotation = turn;
                cloud.gaussians.push(g);
            }
        }
    }
    let backdrop = start..cloud.len();

    let sfm = sfm_from_cloud(&cloud, &cameras);
    let scene_scale = crate::io::manifest::camera_extent(&cameras);
    SyntheticScene {
        cloud,
        plane,
        mirror: config.with_mirror.then_some(rect),
        ring: CameraRing {
            count: camera_count,
            ..config.ring.clone()
        },
        cameras,
        sfm,
        objects,
        mirror_surface,
        backdrop,
        scene_scale,
    }
}

/// SfM stand-in: the ground-truth means, observed wherever they project
/// inside a frame.
fn sfm_from_cloud(cloud: &GaussianCloud, cameras: &[Camera]) -> SfmPointCloud {
    let mut sfm = SfmPointCloud::default();
    for g in &cloud.gaussians {
        sfm.points.push(g.mean);
        let rgb = eval_sh(&g.sh, &Vector3::z()).expect("degree-0 sh").map(|v| v.clamp(0.0, 1.0));
        sfm.colors.push(rgb);
        let obs = cameras
            .iter()
            .enumerate()
            .filter_map(|(f, cam)| {
                let p = cam.project(&g.mean)?;
                let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < cam.width as f64 && p.y < cam.height as f64;
                inside.then_some(Observation { frame: f, pixel: p })
            })
            .collect();
        sfm.observations.push(obs);
    }
    sfm
}

struct OracleSplat {
    mean: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    depth: f64,
    color: Vector3<f64>,
    opacity: f64,
}

const ORACLE_LOW_PASS: f64 = 0.3;
const ORACLE_NEAR: f64 = 0.01;

fn oracle_splat(cam: &Camera, mean: &Vector3<f64>, cov: &Matrix3<f64>, color: Vector3<f64>, opacity: f64) -> Option<OracleSplat> {
    let pc = cam.rotation * mean + cam.translation;
    if pc.z <= ORACLE_NEAR {
        return None;
    }
    // Rows of the projection Jacobian at the mean.
    let row_x = Vector3::new(cam.fx / pc.z, 0.0, -cam.fx * pc.x / (pc.z * pc.z));
    let row_y = Vector3::new(0.0, cam.fy / pc.z, -cam.fy * pc.y / (pc.z * pc.z));
    let cov_cam = cam.rotation * cov * cam.rotation.transpose();
    let sxx = row_x.dot(&(cov_cam * row_x)) + ORACLE_LOW_PASS;
    let syy = row_y.dot(&(cov_cam * row_y)) + ORACLE_LOW_PASS;
    let sxy = row_x.dot(&(cov_cam * row_y));
    let det = sxx * syy - sxy * sxy;
    Some(OracleSplat {
        mean: Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy),
        inv_cov: Matrix2::new(syy, -sxy, -sxy, sxx) / det,
        depth: pc.z,
        color,
        opacity,
    })
}

fn oracle_pass(splats: &mut [OracleSplat], cam: &Camera) -> ImageBuf {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    ImageBuf::from_fn(cam.width, cam.height, 3, |x, y, c| {
        let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        let mut acc = 0.0;
        for s in splats.iter() {
            let d = p - s.mean;
            let a = s.opacity * (-0.5 * d.dot(&(s.inv_cov * d))).exp();
            acc += s.color[c] * a * t;
            t *= 1.0 - a;
        }
        acc
    })
}

/// Reference render: every Gaussian evaluated at every pixel, exact
/// front-to-back compositing, mirror pass by explicit reflection, mask by
/// ray casting against the mirror rectangle (0 inside).
pub fn oracle_render(scene: &SyntheticScene, camera: &Camera) -> (ImageBuf, ImageBuf) {
    let center = -camera.rotation.transpose() * camera.translation;
    let shade = |g: &Gaussian, dir: Vector3<f64>| eval_sh(&g.sh, &dir.normalize()).expect("valid sh").map(|v| v.max(0.0));
    let cov = |g: &Gaussian| {
        let q = g.rotation.normalize();
        let r = crate::model::quat_to_matrix(&q);
        let s = g.log_scale.map(|v| v.exp());
        let m = r * Matrix3::from_diagonal(&s);
        m * m.transpose()
    };

    let mut real: Vec<OracleSplat> = scene
        .cloud
        .gaussians
        .iter()
        .filter_map(|g| oracle_splat(camera, &g.mean, &cov(g), shade(g, g.mean - center), g.opacity()))
        .collect();
    let real_img = oracle_pass(&mut real, camera);

    let Some(rect) = scene.mirror else {
        return (real_img, ImageBuf::filled(camera.width, camera.height, 1, 1.0));
    };

    let len = scene.plane.normal.norm();
    let n = scene.plane.normal / len;
    let b = scene.plane.offset / len;
    let h = Matrix3::identity() - 2.0 * n * n.transpose();
    let reflect = |x: &Vector3<f64>| h * x - 2.0 * b * n;
    let virtual_eye = reflect(&center);
    let mut mirrored: Vec<OracleSplat> = scene
        .cloud
        .gaussians
        .iter()
        .filter(|g| n.dot(&g.mean) + b > 0.0)
        .filter_map(|g| {
            let c = h * cov(g) * h;
            oracle_splat(camera, &reflect(&g.mean), &c, shade(g, g.mean - virtual_eye), g.opacity())
        })
        .collect();
    let mirror_img = oracle_pass(&mut mirrored, camera);

    let kinv = Matrix3::new(1.0 / camera.fx, 0.0, -camera.cx / camera.fx, 0.0, 1.0 / camera.fy, -camera.cy / camera.fy, 0.0, 0.0, 1.0);
    let mask = ImageBuf::from_fn(camera.width, camera.height, 1, |x, y, _| {
        let dir = camera.rotation.transpose() * (kinv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0));
        if rect.hit(&scene.plane, &center, &dir) {
            0.0
        } else {
            1.0
        }
    });
    let image = ImageBuf::from_fn(camera.width, camera.height, 3, |x, y, c| {
        let m = mask.get(x, y, 0);
        real_img.get(x, y, c) * m + mirror_img.get(x, y, c) * (1.0 - m)
    });
    (image, mask)
}

impl SyntheticScene {
    /// Oracle renders of every camera as an in-memory dataset with the
    /// default train/test split.
    pub fn to_scene(&self) -> Scene {
        let renders: Vec<(ImageBuf, ImageBuf)> = self.cameras.par_iter().map(|c| oracle_render(self, c)).collect();
        let (images, masks) = renders.into_iter().unzip();
        Scene {
            root: PathBuf::new(),
            cameras: self.cameras.clone(),
            images,
            masks,
            splits: (0..self.cameras.len()).map(default_split).collect(),
            sfm: self.sfm.clone(),
            scene_scale: self.scene_scale,
        }
    }
}

/// Renders every camera with the oracle and writes a loadable dataset plus
/// the ground truth (`gt.ply`, `gt.plane.json`). Returns the manifest path.
pub fn write_dataset(scene: &SyntheticScene, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let renders: Vec<(ImageBuf, ImageBuf)> = scene.cameras.iter().map(|c| oracle_render(scene, c)).collect();
    let frames: Vec<FrameData> = scene
        .cameras
        .iter()
        .zip(&renders)
        .map(|(camera, (image, mask))| FrameData {
            camera,
            image,
            mask,
            split: None,
        })
        .collect();
    let manifest = write_scene(dir, &frames, &scene.sfm, Some(scene.scene_scale))?;
    save_checkpoint(&scene.cloud, Some(&scene.plane), &dir.join("gt.ply"))?;
    Ok(manifest)
}
