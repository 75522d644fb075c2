use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera pose (x right, y down, z forward).
///
/// Pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)` and is sampled at its center.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with the image "up" roughly along `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Pixel coordinates of a world point, `None` when it is not in front.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let p = self.to_camera(x);
        (p.z > 0.0).then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// World-space direction of the ray through pixel coordinates `pixel`.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let local = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * local).normalize()
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera has an empty image".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > 1e-6 || self.rotation.determinant() < 0.0 {
            return Err(Error::Config(format!(
                "camera rotation is not a proper rotation (orthogonality error {err:e})"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_centers_the_target() {
        let cam = Camera::look_at(
            Vector3::new(3.0, -1.0, 4.0),
            Vector3::new(0.5, 0.2, 0.0),
            Vector3::z(),
            50.0,
            64,
            48,
        );
        cam.validate().unwrap();
        assert_relative_eq!(cam.center(), Vector3::new(3.0, -1.0, 4.0), epsilon = 1e-12);
        let p = cam.project(&Vector3::new(0.5, 0.2, 0.0)).unwrap();
        assert_relative_eq!(p, Vector2::new(32.0, 24.0), epsilon = 1e-9);
        let ray = cam.ray_direction(&p);
        assert_relative_eq!(ray, (Vector3::new(0.5, 0.2, 0.0) - cam.center()).normalize(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_reflection_matrix() {
        let mut cam = Camera::look_at(Vector3::new(0.0, 0.0, 5.0), Vector3::zeros(), Vector3::y(), 10.0, 8, 8);
        cam.rotation = -cam.rotation;
        assert!(cam.validate().is_err());
    }
}
