//! Plane JSON: `{"normal": [nx, ny, nz], "offset": b}`.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mirror::MirrorPlane;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneJson {
    normal: [f64; 3],
    offset: f64,
}

pub fn plane_to_json(plane: &MirrorPlane) -> String {
    serde_json::to_string_pretty(&PlaneJson {
        normal: [plane.normal.x, plane.normal.y, plane.normal.z],
        offset: plane.offset,
    })
    .expect("plane serializes")
}

pub fn write_plane(plane: &MirrorPlane, path: &Path) -> Result<()> {
    std::fs::write(path, plane_to_json(plane) + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_plane(path: &Path) -> Result<MirrorPlane> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: PlaneJson = serde_json::from_str(&text).map_err(|e| Error::MalformedJson {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let plane = MirrorPlane::new(Vector3::from(p.normal), p.offset);
    plane.check()?;
    Ok(plane)
}
