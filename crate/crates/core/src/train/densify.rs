//! Adaptive density control: clone small Gaussians and split large ones
//! where the screen-space positional gradient is high, prune transparent or
//! oversized ones.

use nalgebra::Vector3;
use rand::Rng;

use crate::model::{logit, quat_to_matrix, normalize_quat};
use crate::raster::SceneGrads;

use super::adam::GaussianMoments;
use super::state::TrainingState;

/// A split replaces one Gaussian by this many, each scaled down by 1.6.
pub const SPLIT_COUNT: usize = 2;
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Opacity ceiling applied by an opacity reset.
pub const OPACITY_RESET_VALUE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    pub opacity_floor: f64,
    /// World-size pruning threshold; `None` disables it.
    pub scale_ceiling: Option<f64>,
    /// Gaussians with a largest scale above this are split, others cloned.
    pub split_scale: f64,
    pub max_gaussians: usize,
}

impl TrainingState {
    /// Adds one view's screen-space gradients to the densification
    /// statistics. Pixel gradients are converted to normalized device
    /// coordinates so the threshold does not depend on the resolution.
    pub fn accumulate_densify_stats(&mut self, grads: &SceneGrads, width: usize, height: usize) {
        let (hw, hh) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..self.cloud.len() {
            if grads.visible[i] {
                let g = grads.mean2d[i];
                self.grad_accum[i] += (g.x * hw).hypot(g.y * hh);
                self.grad_count[i] += 1;
            }
        }
    }

    /// Mean accumulated gradient norm per Gaussian.
    pub fn mean_screen_grad(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.grad_count)
            .map(|(&a, &c)| if c == 0 { 0.0 } else { a / c as f64 })
            .collect()
    }

    pub fn densify_and_prune(&mut self, params: &DensifyParams) -> DensifyOutcome {
        let avg = self.mean_screen_grad();
        let mut candidates: Vec<usize> = (0..self.cloud.len()).filter(|&i| avg[i] >= params.grad_threshold).collect();
        let room = params.max_gaussians.saturating_sub(self.cloud.len());
        if candidates.len() > room {
            candidates.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
            candidates.truncate(room);
            candidates.sort_unstable();
        }

        let mut outcome = DensifyOutcome::default();
        let mut remove = vec![false; self.cloud.len()];
        let mut added = Vec::new();
        for &i in &candidates {
            let g = &self.cloud.gaussians[i];
            let scale = g.scale();
            if scale.max() <= params.split_scale {
                added.push(g.clone());
                outcome.cloned += 1;
            } else {
                let r = quat_to_matrix(&normalize_quat(&g.rotation));
                for _ in 0..SPLIT_COUNT {
                    let sample = Vector3::from_fn(|k, _| scale[k] * standard_normal(&mut self.densify_rng));
                    let mut child = g.clone();
                    child.mean = g.mean + r * sample;
                    child.log_scale = (scale / SPLIT_SCALE_DIVISOR).map(f64::ln);
                    added.push(child);
                }
                remove[i] = true;
                outcome.split += 1;
            }
        }
        for g in added {
            self.moments.push(GaussianMoments::zeros(g.sh.len()));
            self.cloud.gaussians.push(g);
            remove.push(false);
        }

        for (i, g) in self.cloud.gaussians.iter().enumerate() {
            let too_faint = g.opacity() < params.opacity_floor;
            let too_large = params.scale_ceiling.is_some_and(|c| g.scale().max() > c);
            if !remove[i] && (too_faint || too_large) {
                remove[i] = true;
                outcome.pruned += 1;
            }
        }
        self.retain(&remove);
        self.reset_densify_stats();
        outcome
    }

    /// Drops the Gaussians flagged in `remove` together with their moments.
    pub(crate) fn retain(&mut self, remove: &[bool]) {
        let mut keep = remove.iter().map(|r| !r);
        self.cloud.gaussians.retain(|_| keep.next().unwrap());
        let mut keep = remove.iter().map(|r| !r);
        self.moments.retain(|_| keep.next().unwrap());
    }

    pub fn reset_densify_stats(&mut self) {
        self.grad_accum = vec![0.0; self.cloud.len()];
        self.grad_count = vec![0; self.cloud.len()];
    }

    /// Caps every opacity at 0.01 and clears the opacity moments.
    pub fn reset_opacity(&mut self) {
        let cap = logit(OPACITY_RESET_VALUE);
        for (g, mo) in self.cloud.gaussians.iter_mut().zip(&mut self.moments) {
            g.opacity_logit = g.opacity_logit.min(cap);
            mo.m.opacity_logit = 0.0;
            mo.v.opacity_logit = 0.0;
        }
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
