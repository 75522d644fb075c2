//! Element-wise Adam.

use nalgebra::{Vector3, Vector4};

use crate::mirror::PlaneGrad;
use crate::raster::GaussianGrad;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Bias corrections for step `t` (1-based).
#[derive(Debug, Clone, Copy)]
pub struct AdamStep {
    c1: f64,
    c2: f64,
}

impl AdamStep {
    pub fn new(t: u64) -> Self {
        let t = t.max(1) as i32;
        Self {
            c1: 1.0 - BETA1.powi(t),
            c2: 1.0 - BETA2.powi(t),
        }
    }

    #[inline]
    pub fn apply(&self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / self.c1;
        let v_hat = *v / self.c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }

    pub fn apply3(&self, p: &mut Vector3<f64>, g: &Vector3<f64>, m: &mut Vector3<f64>, v: &mut Vector3<f64>, lr: f64) {
        for i in 0..3 {
            self.apply(&mut p[i], g[i], &mut m[i], &mut v[i], lr);
        }
    }

    pub fn apply4(&self, p: &mut Vector4<f64>, g: &Vector4<f64>, m: &mut Vector4<f64>, v: &mut Vector4<f64>, lr: f64) {
        for i in 0..4 {
            self.apply(&mut p[i], g[i], &mut m[i], &mut v[i], lr);
        }
    }
}

/// First and second moments for one Gaussian, laid out like its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub m: GaussianGrad,
    pub v: GaussianGrad,
}

impl GaussianMoments {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            m: GaussianGrad::zeros(sh_len),
            v: GaussianGrad::zeros(sh_len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlaneMoments {
    pub m: PlaneGrad,
    pub v: PlaneGrad,
    pub t: u64,
}
