//! Gaussian checkpoints in the 3DGS PLY layout plus a `mirror_label`
//! column, with the plane in a sidecar JSON file.

use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::mirror::MirrorPlane;
use crate::model::{saturated_label_logit, Gaussian, GaussianCloud};

use super::plane::{read_plane, write_plane};
use super::ply::{read_ply, write_ply, Ply, PlyElement, PlyProperty, ScalarType};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub plane: Option<MirrorPlane>,
    /// Non-fatal issues found while loading.
    pub warnings: Vec<String>,
}

/// `scene.ply` -> `scene.plane.json`.
pub fn plane_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("plane.json")
}

fn property_names(sh_coeffs: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3 * (sh_coeffs - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.push("mirror_label".into());
    names
}

/// Writes doubles, so every parameter survives a round trip bit for bit.
/// The plane, when given, goes to [`plane_sidecar_path`].
pub fn save_checkpoint(cloud: &GaussianCloud, plane: Option<&MirrorPlane>, path: &Path) -> Result<()> {
    let coeffs = (cloud.sh_degree + 1) * (cloud.sh_degree + 1);
    let props = property_names(coeffs)
        .into_iter()
        .map(|n| PlyProperty::scalar(n, ScalarType::F64))
        .collect();
    let mut el = PlyElement::new("vertex", props);
    let rest = coeffs - 1;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if g.sh.len() != coeffs {
            return Err(Error::DimensionMismatch(format!(
                "gaussian {i} has {} sh coefficients, cloud degree needs {coeffs}",
                g.sh.len()
            )));
        }
        let mut row = vec![g.mean.x, g.mean.y, g.mean.z, g.sh[0].x, g.sh[0].y, g.sh[0].z];
        for c in 0..3 {
            for k in 0..rest {
                row.push(g.sh[k + 1][c]);
            }
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale.iter());
        row.extend(g.rotation.iter());
        row.push(g.label_logit);
        el.rows.push(row);
    }
    write_ply(path, &Ply { elements: vec![el] })?;
    if let Some(p) = plane {
        write_plane(p, &plane_sidecar_path(path))?;
    }
    Ok(())
}

/// Reads a checkpoint. Clouds without `mirror_label` (vanilla 3DGS) get
/// saturated labels, i.e. everything is real content.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ply = read_ply(path)?;
    let el = ply
        .element("vertex")
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no vertex element".into(),
        })?;
    let n_rest = el.properties.iter().filter(|p| p.name.starts_with("f_rest_")).count();
    if n_rest % 3 != 0 {
        return Err(Error::DimensionMismatch(format!("{n_rest} f_rest properties is not a multiple of 3")));
    }
    let coeffs = n_rest / 3 + 1;
    let degree = (0..=3)
        .find(|l| (l + 1) * (l + 1) == coeffs)
        .ok_or_else(|| Error::DimensionMismatch(format!("{coeffs} sh coefficients do not match a degree <= 3")))?;
    let expected = property_names(coeffs);
    let unknown: Vec<String> = el
        .properties
        .iter()
        .filter(|p| !expected.contains(&p.name) && !["nx", "ny", "nz"].contains(&p.name.as_str()))
        .map(|p| p.name.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownProperty(unknown));
    }
    let col = |name: &str| -> Result<usize> {
        el.column(name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing property `{name}`"),
        })
    };
    let cols: Vec<usize> = expected[..expected.len() - 1].iter().map(|n| col(n)).collect::<Result<_>>()?;
    let label_col = el.column("mirror_label");
    let mut warnings = Vec::new();
    if label_col.is_none() {
        let msg = format!("{}: no mirror_label property; labels default to real content", path.display());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let rest = coeffs - 1;
    let mut cloud = GaussianCloud::new(degree);
    for row in &el.rows {
        let v = |i: usize| row[cols[i]];
        let mut sh = vec![Vector3::new(v(3), v(4), v(5))];
        for k in 0..rest {
            sh.push(Vector3::new(v(6 + k), v(6 + rest + k), v(6 + 2 * rest + k)));
        }
        let b = 6 + 3 * rest;
        cloud.gaussians.push(Gaussian {
            mean: Vector3::new(v(0), v(1), v(2)),
            sh,
            opacity_logit: v(b),
            log_scale: Vector3::new(v(b + 1), v(b + 2), v(b + 3)),
            rotation: Vector4::new(v(b + 4), v(b + 5), v(b + 6), v(b + 7)),
            label_logit: label_col.map_or_else(saturated_label_logit, |c| row[c]),
        });
    }
    let sidecar = plane_sidecar_path(path);
    let plane = if sidecar.exists() { Some(read_plane(&sidecar)?) } else { None };
    Ok(Checkpoint { cloud, plane, warnings })
}
