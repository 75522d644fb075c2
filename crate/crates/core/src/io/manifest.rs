//! Scene manifests: a JSON file listing frames (image, mask, camera, split)
//! and a sparse point PLY with an `observation` element.
//!
//! ```json
//! {
//!   "frames": [
//!     {"image": "images/000.png", "mask": "masks/000.png", "split": "train",
//!      "camera": {"fx": 64, "fy": 64, "cx": 32, "cy": 32, "width": 64, "height": 64,
//!                 "rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0,0,4]}}
//!   ],
//!   "sparse_points": "sparse.ply",
//!   "scene_scale": 2.5
//! }
//! ```
//!
//! Paths are relative to the manifest. Without `split`, every 8th frame
//! (index 0, 8, ...) is a test frame.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};
use crate::model::Camera;
use crate::plane_estimation::{Observation, SfmPointCloud};

use super::image::{read_image, read_mask, write_image};
use super::ply::{read_ply, write_ply, Ply, PlyElement, PlyProperty, ScalarType};

pub const MANIFEST_FILE: &str = "scene.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, rows.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl From<&CameraJson> for Camera {
    fn from(c: &CameraJson) -> Self {
        let r = &c.rotation;
        Camera::new(
            c.fx,
            c.fy,
            c.cx,
            c.cy,
            c.width,
            c.height,
            Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]),
            Vector3::from(c.translation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameJson {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub camera: CameraJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub frames: Vec<FrameJson>,
    pub sparse_points: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_scale: Option<f64>,
}

/// A loaded dataset.
#[derive(Debug, Clone)]
pub struct Scene {
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuf>,
    pub masks: Vec<ImageBuf>,
    pub splits: Vec<Split>,
    pub sfm: SfmPointCloud,
    pub scene_scale: f64,
}

impl Scene {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.cameras.iter().map(|c| c.center()).collect()
    }
}

pub fn default_split(index: usize) -> Split {
    if index % 8 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// 1.1 times the largest camera distance from the camera centroid.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.center()).collect();
    let mid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mid).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Accepts either the manifest file or a directory containing `scene.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedJson {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cameras: Vec<Camera> = manifest.frames.iter().map(|f| Camera::from(&f.camera)).collect();
    for (i, c) in cameras.iter().enumerate() {
        c.validate()
            .map_err(|e| Error::Usage(format!("frame {i}: {e}")))?;
    }
    let loaded: Vec<(ImageBuf, ImageBuf)> = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let img = read_image(&root.join(&f.image))?;
            let mask = read_mask(&root.join(&f.mask))?;
            let (w, h) = (f.camera.width, f.camera.height);
            if img.width != w || img.height != h {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i}: image is {}x{}, camera is {w}x{h}",
                    img.width, img.height
                )));
            }
            if mask.width != w || mask.height != h {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i}: mask is {}x{}, camera is {w}x{h}",
                    mask.width, mask.height
                )));
            }
            Ok((img, mask))
        })
        .collect::<Result<_>>()?;
    let (images, masks) = loaded.into_iter().unzip();
    let splits = manifest
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| f.split.unwrap_or_else(|| default_split(i)))
        .collect();
    let sfm = read_sparse_points(&root.join(&manifest.sparse_points), &cameras)?;
    let scene_scale = manifest.scene_scale.unwrap_or_else(|| camera_extent(&cameras));
    Ok(Scene {
        root,
        cameras,
        images,
        masks,
        splits,
        sfm,
        scene_scale,
    })
}

/// Reads the sparse point PLY and validates every observation against the
/// frames' cameras.
pub fn read_sparse_points(path: &Path, cameras: &[Camera]) -> Result<SfmPointCloud> {
    let ply = read_ply(path)?;
    let parse = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: msg,
    };
    let vert = ply.element("vertex").ok_or_else(|| parse("no vertex element".into()))?;
    let col = |el: &PlyElement, n: &str| el.column(n).ok_or_else(|| parse(format!("missing property `{n}`")));
    let (cx, cy, cz) = (col(vert, "x")?, col(vert, "y")?, col(vert, "z")?);
    let rgb = [vert.column("red"), vert.column("green"), vert.column("blue")];
    let mut sfm = SfmPointCloud::default();
    for row in &vert.rows {
        sfm.points.push(Vector3::new(row[cx], row[cy], row[cz]));
        sfm.colors.push(Vector3::from(rgb.map(|c| c.map_or(0.5, |c| row[c] / 255.0))));
        sfm.observations.push(Vec::new());
    }
    if let Some(obs) = ply.element("observation") {
        let (cp, cf, ox, oy) = (col(obs, "point")?, col(obs, "frame")?, col(obs, "x")?, col(obs, "y")?);
        for row in &obs.rows {
            let (p, f) = (row[cp] as usize, row[cf] as usize);
            let (x, y) = (row[ox], row[oy]);
            let cam = cameras
                .get(f)
                .ok_or_else(|| Error::DimensionMismatch(format!("observation references frame {f} of {}", cameras.len())))?;
            if p >= sfm.points.len() {
                return Err(Error::DimensionMismatch(format!(
                    "observation references point {p} of {}",
                    sfm.points.len()
                )));
            }
            if !(0.0..cam.width as f64).contains(&x) || !(0.0..cam.height as f64).contains(&y) {
                return Err(Error::DimensionMismatch(format!(
                    "observation ({x}, {y}) of point {p} lies outside frame {f}"
                )));
            }
            sfm.observations[p].push(Observation {
                frame: f,
                pixel: Vector2::new(x, y),
            });
        }
    }
    Ok(sfm)
}

pub fn write_sparse_points(path: &Path, sfm: &SfmPointCloud) -> Result<()> {
    let mut vert = PlyElement::new(
        "vertex",
        vec![
            PlyProperty::scalar("x", ScalarType::F64),
            PlyProperty::scalar("y", ScalarType::F64),
            PlyProperty::scalar("z", ScalarType::F64),
            PlyProperty::scalar("red", ScalarType::U8),
            PlyProperty::scalar("green", ScalarType::U8),
            PlyProperty::scalar("blue", ScalarType::U8),
        ],
    );
    let mut obs = PlyElement::new(
        "observation",
        vec![
            PlyProperty::scalar("point", ScalarType::U32),
            PlyProperty::scalar("frame", ScalarType::U32),
            PlyProperty::scalar("x", ScalarType::F64),
            PlyProperty::scalar("y", ScalarType::F64),
        ],
    );
    for (i, p) in sfm.points.iter().enumerate() {
        let c = sfm.colors.get(i).copied().unwrap_or(Vector3::repeat(0.5));
        vert.rows.push(vec![
            p.x,
            p.y,
            p.z,
            super::image::quantize(c.x) as f64,
            super::image::quantize(c.y) as f64,
            super::image::quantize(c.z) as f64,
        ]);
        for o in sfm.observations.get(i).map(|v| v.as_slice()).unwrap_or(&[]) {
            obs.rows.push(vec![i as f64, o.frame as f64, o.pixel.x, o.pixel.y]);
        }
    }
    write_ply(path, &Ply { elements: vec![vert, obs] })
}

/// Frame payload for [`write_scene`].
pub struct FrameData<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuf,
    pub mask: &'a ImageBuf,
    pub split: Option<Split>,
}

/// Writes images, masks, sparse points and `scene.json` under `dir`.
pub fn write_scene(dir: &Path, frames: &[FrameData], sfm: &SfmPointCloud, scene_scale: Option<f64>) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:03}.png"));
        let mask = PathBuf::from(format!("masks/{i:03}.png"));
        write_image(f.image, &dir.join(&image))?;
        write_image(f.mask, &dir.join(&mask))?;
        records.push(FrameJson {
            image,
            mask,
            camera: CameraJson::from(f.camera),
            split: f.split,
        });
    }
    write_sparse_points(&dir.join("sparse.ply"), sfm)?;
    let manifest = SceneManifest {
        frames: records,
        sparse_points: PathBuf::from("sparse.ply"),
        scene_scale,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
