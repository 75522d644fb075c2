//! COLMAP sparse models in the text format (`cameras.txt`, `images.txt`,
//! `points3D.txt`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::model::{normalize_quat, quat_to_matrix, Camera};
use crate::plane_estimation::{Observation, SfmPointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// (fx, fy, cx, cy) for the supported pinhole models.
    pub fn intrinsics(&self) -> Result<(f64, f64, f64, f64)> {
        match (self.model.as_str(), self.params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => Ok((*fx, *fy, *cx, *cy)),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => Ok((*f, *f, *cx, *cy)),
            _ => Err(Error::UnsupportedCameraModel(self.model.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation (w, x, y, z).
    pub qvec: Vector4<f64>,
    pub tvec: Vector3<f64>,
    pub camera_id: u32,
    pub name: String,
    /// (x, y, point3D id or -1).
    pub points2d: Vec<(f64, f64, i64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub error: f64,
    /// (image id, index into that image's points2d).
    pub track: Vec<(u32, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    /// Sorted by image id.
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.starts_with('#'))
        .collect())
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    toks: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Self {
            path,
            line,
            toks: text.split_whitespace(),
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.toks.next().ok_or_else(|| self.err(format!("missing {what}")))?;
        tok.parse().map_err(|_| self.err(format!("bad {what} `{tok}`")))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.toks.by_ref().collect()
    }
}

fn read_cameras(path: &Path) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut out = BTreeMap::new();
    for (ln, l) in content_lines(path)? {
        if l.is_empty() {
            continue;
        }
        let mut f = Fields::new(path, ln, &l);
        let id = f.next("camera id")?;
        let model: String = f.next("model")?;
        let width = f.next("width")?;
        let height = f.next("height")?;
        let params = f
            .rest()
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| f.err(format!("bad parameter `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let cam = ColmapCamera {
            id,
            model,
            width,
            height,
            params,
        };
        match cam.model.as_str() {
            "PINHOLE" | "SIMPLE_PINHOLE" => {
                cam.intrinsics().map_err(|_| f.err(format!("wrong parameter count for {}", cam.model)))?;
            }
            _ => return Err(Error::UnsupportedCameraModel(cam.model)),
        }
        out.insert(id, cam);
    }
    Ok(out)
}

fn read_images(path: &Path) -> Result<Vec<ColmapImage>> {
    let lines = content_lines(path)?;
    let mut out = Vec::new();
    let mut it = lines.iter();
    while let Some((ln, l)) = it.next() {
        if l.is_empty() {
            continue;
        }
        let mut f = Fields::new(path, *ln, l);
        let id = f.next("image id")?;
        let qvec = Vector4::new(f.next("qw")?, f.next("qx")?, f.next("qy")?, f.next("qz")?);
        let tvec = Vector3::new(f.next("tx")?, f.next("ty")?, f.next("tz")?);
        let camera_id = f.next("camera id")?;
        let name = f.rest().join(" ");
        if name.is_empty() {
            return Err(f.err("missing image name"));
        }
        let mut points2d = Vec::new();
        if let Some((ln2, l2)) = it.next() {
            let mut g = Fields::new(path, *ln2, l2);
            let toks = g.rest();
            if toks.len() % 3 != 0 {
                return Err(g.err("points2D line must hold triples"));
            }
            for c in toks.chunks(3) {
                let x = c[0].parse().map_err(|_| g.err(format!("bad x `{}`", c[0])))?;
                let y = c[1].parse().map_err(|_| g.err(format!("bad y `{}`", c[1])))?;
                let p = c[2].parse().map_err(|_| g.err(format!("bad point id `{}`", c[2])))?;
                points2d.push((x, y, p));
            }
        }
        out.push(ColmapImage {
            id,
            qvec,
            tvec,
            camera_id,
            name,
            points2d,
        });
    }
    out.sort_by_key(|i| i.id);
    Ok(out)
}

fn read_points(path: &Path) -> Result<Vec<ColmapPoint>> {
    let mut out = Vec::new();
    for (ln, l) in content_lines(path)? {
        if l.is_empty() {
            continue;
        }
        let mut f = Fields::new(path, ln, &l);
        let id = f.next("point id")?;
        let xyz = Vector3::new(f.next("x")?, f.next("y")?, f.next("z")?);
        let rgb = [f.next("r")?, f.next("g")?, f.next("b")?];
        let error = f.next("error")?;
        let toks = f.rest();
        if toks.len() % 2 != 0 {
            return Err(f.err("track must hold (image id, point2d index) pairs"));
        }
        let track = toks
            .chunks(2)
            .map(|c| {
                Ok((
                    c[0].parse().map_err(|_| f.err(format!("bad image id `{}`", c[0])))?,
                    c[1].parse().map_err(|_| f.err(format!("bad point2d index `{}`", c[1])))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ColmapPoint { id, xyz, rgb, error, track });
    }
    Ok(out)
}

pub fn read_colmap_model(dir: &Path) -> Result<ColmapModel> {
    Ok(ColmapModel {
        cameras: read_cameras(&dir.join("cameras.txt"))?,
        images: read_images(&dir.join("images.txt"))?,
        points: read_points(&dir.join("points3D.txt"))?,
    })
}

pub fn write_colmap_model(model: &ColmapModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in model.cameras.values() {
        write!(s, "{} {} {} {}", c.id, c.model, c.width, c.height).unwrap();
        for p in &c.params {
            write!(s, " {p}").unwrap();
        }
        s.push('\n');
    }
    let path = dir.join("cameras.txt");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;

    let mut s = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for im in &model.images {
        let (q, t) = (&im.qvec, &im.tvec);
        writeln!(s, "{} {} {} {} {} {} {} {} {} {}", im.id, q[0], q[1], q[2], q[3], t[0], t[1], t[2], im.camera_id, im.name)
            .unwrap();
        let pts: Vec<String> = im.points2d.iter().map(|(x, y, p)| format!("{x} {y} {p}")).collect();
        s.push_str(&pts.join(" "));
        s.push('\n');
    }
    let path = dir.join("images.txt");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;

    let mut s = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    for p in &model.points {
        write!(s, "{} {} {} {} {} {} {} {}", p.id, p.xyz.x, p.xyz.y, p.xyz.z, p.rgb[0], p.rgb[1], p.rgb[2], p.error).unwrap();
        for (i, k) in &p.track {
            write!(s, " {i} {k}").unwrap();
        }
        s.push('\n');
    }
    let path = dir.join("points3D.txt");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

impl ColmapModel {
    /// Cameras in image order and the SfM cloud with observations indexed by
    /// that order.
    pub fn to_scene(&self) -> Result<(Vec<Camera>, SfmPointCloud)> {
        let mut cameras = Vec::with_capacity(self.images.len());
        let mut frame_of = BTreeMap::new();
        for (f, im) in self.images.iter().enumerate() {
            let cam = self
                .cameras
                .get(&im.camera_id)
                .ok_or_else(|| Error::Usage(format!("image {} references missing camera {}", im.id, im.camera_id)))?;
            let (fx, fy, cx, cy) = cam.intrinsics()?;
            cameras.push(Camera::new(
                fx,
                fy,
                cx,
                cy,
                cam.width,
                cam.height,
                quat_to_matrix(&normalize_quat(&im.qvec)),
                im.tvec,
            ));
            frame_of.insert(im.id, f);
        }
        let mut sfm = SfmPointCloud::default();
        for p in &self.points {
            let mut obs = Vec::with_capacity(p.track.len());
            for (image_id, idx) in &p.track {
                let f = *frame_of
                    .get(image_id)
                    .ok_or_else(|| Error::Usage(format!("point {} tracks missing image {image_id}", p.id)))?;
                let (x, y, _) = *self.images[f].points2d.get(*idx).ok_or_else(|| {
                    Error::Usage(format!("point {} tracks keypoint {idx} absent from image {image_id}", p.id))
                })?;
                obs.push(Observation {
                    frame: f,
                    pixel: Vector2::new(x, y),
                });
            }
            sfm.points.push(p.xyz);
            sfm.colors.push(Vector3::from(p.rgb.map(|c| c as f64 / 255.0)));
            sfm.observations.push(obs);
        }
        Ok((cameras, sfm))
    }
}

pub fn load_colmap_text(dir: &Path) -> Result<(Vec<Camera>, SfmPointCloud)> {
    read_colmap_model(dir)?.to_scene()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, camera: &str, points: &str) {
        std::fs::write(dir.join("cameras.txt"), format!("# cams\n{camera}\n")).unwrap();
        std::fs::write(
            dir.join("images.txt"),
            "# images\n1 1 0 0 0 0.5 -1 2 1 frame 000.png\n10.5 20.25 7 3 4 -1\n",
        )
        .unwrap();
        std::fs::write(dir.join("points3D.txt"), points).unwrap();
    }

    #[test]
    fn simple_pinhole_expands_focal() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1 SIMPLE_PINHOLE 64 48 50 32 24", "");
        let (cams, sfm) = load_colmap_text(dir.path()).unwrap();
        assert_eq!((cams[0].fx, cams[0].fy, cams[0].cx, cams[0].cy), (50.0, 50.0, 32.0, 24.0));
        assert_eq!(cams[0].translation, Vector3::new(0.5, -1.0, 2.0));
        assert!(sfm.points.is_empty());
    }

    #[test]
    fn unsupported_model_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1 OPENCV 64 48 50 50 32 24 0 0 0 0", "");
        assert!(matches!(read_colmap_model(dir.path()), Err(Error::UnsupportedCameraModel(m)) if m == "OPENCV"));
        write_fixture(dir.path(), "1 PINHOLE 64 48 50 50 32 24", "# pts\n\n7 1 2 zz 0 0 0 0.1 1 0\n");
        match read_colmap_model(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tracks_become_observations() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1 PINHOLE 64 48 50 51 32 24", "7 1 2 3 255 0 128 0.1 1 0\n");
        let (_, sfm) = load_colmap_text(dir.path()).unwrap();
        assert_eq!(sfm.observations[0], vec![Observation { frame: 0, pixel: Vector2::new(10.5, 20.25) }]);
        assert_eq!(sfm.colors[0], Vector3::new(1.0, 0.0, 128.0 / 255.0));
        let model = read_colmap_model(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_colmap_model(&model, out.path()).unwrap();
        assert_eq!(read_colmap_model(out.path()).unwrap(), model);
    }
}
