//! The three-stage training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::buffer::ImageBuf;
use crate::error::{Error, Result};
use crate::io::Scene;
use crate::mirror::MirrorPlane;
use crate::model::{Camera, GaussianCloud};
use crate::plane_estimation::estimate_plane;
use crate::raster::RasterSettings;
use crate::io::Split;

use super::config::TrainingConfig;
use super::densify::DensifyParams;
use super::objective::{stage1_objective, stage2_objective, stage3_objective, LossBreakdown};
use super::state::{init_cloud_from_sfm, seeded_rng, Stage, TrainingState, GaussianStepLr, STREAM_VIEWS};

/// One training view.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuf,
    pub mask: &'a ImageBuf,
}

/// One row of the loss log. Terms that are not part of a stage's objective
/// are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// 1-based step counted over all stages.
    pub step: usize,
    pub stage: u8,
    pub color: f64,
    pub mask: Option<f64>,
    pub dist: Option<f64>,
    pub total: f64,
    pub plane: Option<MirrorPlane>,
    pub gaussians: usize,
}

pub const LOSS_CSV_HEADER: &str = "step,stage,l_c,l_m,l_d,total,plane_nx,plane_ny,plane_nz,plane_b";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (nx, ny, nz, b) = match &self.plane {
            Some(p) => (
                p.normal.x.to_string(),
                p.normal.y.to_string(),
                p.normal.z.to_string(),
                p.offset.to_string(),
            ),
            None => Default::default(),
        };
        format!(
            "{},{},{},{},{},{},{nx},{ny},{nz},{b}",
            self.step,
            self.stage,
            self.color,
            opt(self.mask),
            opt(self.dist),
            self.total
        )
    }
}

pub fn write_loss_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(LOSS_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Visits the training views in a fresh seeded permutation every epoch.
#[derive(Debug, Clone)]
pub struct ViewSchedule {
    views: Vec<usize>,
    order: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ViewSchedule {
    pub fn new(views: Vec<usize>, seed: u64) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Usage("no training views".into()));
        }
        Ok(Self {
            order: Vec::new(),
            next: 0,
            views,
            rng: seeded_rng(seed, STREAM_VIEWS),
        })
    }

    pub fn next_view(&mut self) -> usize {
        if self.next == self.order.len() {
            self.order = self.views.clone();
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

fn check_loss(loss: &LossBreakdown, step: usize, stage: Stage) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            stage: stage.number(),
            detail: format!("{loss:?}"),
        })
    }
}

fn settings_for(config: &TrainingConfig) -> RasterSettings {
    config.raster_settings()
}

fn require_stage(state: &TrainingState, stage: Stage) -> Result<()> {
    if state.stage == stage {
        Ok(())
    } else {
        Err(Error::Usage(format!("stage {} step called during stage {}", stage.number(), state.stage.number())))
    }
}

impl TrainingState {
    /// Plain splatting step on every Gaussian parameter except labels, with
    /// densification on schedule.
    pub fn stage1_step(&mut self, config: &TrainingConfig, view: View<'_>) -> Result<LossBreakdown> {
        require_stage(self, Stage::One)?;
        let settings = settings_for(config);
        let (l_c, grads, _) = stage1_objective(&self.cloud, view.camera, view.image, config.weights.lambda_ssim, &settings)?;
        let loss = LossBreakdown { color: l_c, total: l_c, ..Default::default() };
        check_loss(&loss, self.step + 1, Stage::One)?;

        let lr = GaussianStepLr::at(config, self.scene_scale, self.step, config.s1 + config.s3);
        self.adam_gaussians(&grads, &lr, None);
        self.step += 1;

        let it = self.step;
        let d = &config.densify;
        if it < d.until_step {
            self.accumulate_densify_stats(&grads, view.camera.width, view.camera.height);
            if it > d.from_step && it % d.interval == 0 {
                let params = DensifyParams {
                    grad_threshold: d.grad_threshold,
                    opacity_floor: d.opacity_floor,
                    scale_ceiling: (it > d.prune_large_after).then(|| d.prune_scale_fraction * self.scene_scale),
                    split_scale: d.percent_dense * self.scene_scale,
                    max_gaussians: d.max_gaussians,
                };
                let out = self.densify_and_prune(&params);
                log::debug!("step {it}: densify {out:?}, {} gaussians", self.cloud.len());
            }
            if d.opacity_reset_interval > 0 && it % d.opacity_reset_interval == 0 {
                self.reset_opacity();
            }
        }
        Ok(loss)
    }

    /// Plane-only step against the ground-truth-mask composite.
    pub fn stage2_step(&mut self, config: &TrainingConfig, view: View<'_>) -> Result<LossBreakdown> {
        require_stage(self, Stage::Two)?;
        let plane = self.plane.ok_or_else(|| Error::Usage("stage 2 needs a plane".into()))?;
        let eval = stage2_objective(
            &self.cloud,
            &plane,
            view.camera,
            view.image,
            view.mask,
            config.weights.lambda_ssim,
            &settings_for(config),
        )?;
        let loss = LossBreakdown { color: eval.loss, total: eval.loss, ..Default::default() };
        check_loss(&loss, self.step + 1, Stage::Two)?;
        if eval.front_empty {
            log::warn!("stage 2 step {}: no gaussian in front of the plane, mirror term skipped", self.step + 1);
        } else {
            let lr = config.plane_lr_stage2.at(self.step, config.s2);
            self.adam_plane(&eval.plane, lr)?;
        }
        self.step += 1;
        Ok(loss)
    }

    /// Joint step on Gaussians, labels and plane.
    pub fn stage3_step(&mut self, config: &TrainingConfig, view: View<'_>) -> Result<LossBreakdown> {
        require_stage(self, Stage::Three)?;
        let plane = self.plane.ok_or_else(|| Error::Usage("stage 3 needs a plane".into()))?;
        let eval = stage3_objective(
            &self.cloud,
            &plane,
            view.camera,
            view.image,
            view.mask,
            &config.weights,
            &settings_for(config),
        )?;
        check_loss(&eval.loss, self.step + 1, Stage::Three)?;
        let lr = GaussianStepLr::at(config, self.scene_scale, config.s1 + self.step, config.s1 + config.s3);
        self.adam_gaussians(&eval.grads, &lr, Some(config.lr.label));
        let plane_lr = config.plane_lr_stage3.at(self.step, config.s3);
        self.adam_plane(&eval.grads.plane, plane_lr)?;
        self.step += 1;
        Ok(eval.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub state: TrainingState,
    pub log: Vec<LogRow>,
    /// Snapshot at the end of stage 1.
    pub stage1_cloud: GaussianCloud,
    /// Plane at the start of stage 2, estimated or given.
    pub initial_plane: Option<MirrorPlane>,
}

/// Plane from the SfM points on mirror borders of the training masks.
pub fn bootstrap_plane(scene: &Scene, config: &TrainingConfig) -> Result<MirrorPlane> {
    let masks: Vec<ImageBuf> = scene
        .masks
        .iter()
        .zip(&scene.splits)
        .map(|(m, s)| match s {
            Split::Train => m.clone(),
            Split::Test => ImageBuf::filled(m.width, m.height, 1, 1.0),
        })
        .collect();
    let fit = estimate_plane(&scene.sfm, &masks, &scene.camera_centers(), &config.plane_estimation, config.seed)?;
    log::info!(
        "estimated plane n = ({:.4}, {:.4}, {:.4}), b = {:.4} from {} inliers",
        fit.plane.normal.x,
        fit.plane.normal.y,
        fit.plane.normal.z,
        fit.plane.offset,
        fit.inliers.len()
    );
    Ok(fit.plane)
}

/// Runs the three stages on the training split of `scene`. `on_row` sees
/// every log row as it is produced.
pub fn train(
    scene: &Scene,
    config: &TrainingConfig,
    plane: Option<MirrorPlane>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainingOutcome> {
    config.validate()?;
    let train_views = scene.indices(Split::Train);
    let mut schedule = ViewSchedule::new(train_views, config.seed)?;
    let cloud = init_cloud_from_sfm(&scene.sfm, config.sh_degree, scene.scene_scale)?;
    let mut state = TrainingState::new(cloud, scene.scene_scale, config.seed)?;
    let mut log_rows = Vec::with_capacity(config.s1 + config.s2 + config.s3);
    let mut global = 0;
    let view = |i: usize| View {
        camera: &scene.cameras[i],
        image: &scene.images[i],
        mask: &scene.masks[i],
    };
    let mut record = |state: &TrainingState, loss: LossBreakdown, stage: Stage, global: usize, log_rows: &mut Vec<LogRow>| {
        let row = LogRow {
            step: global,
            stage: stage.number(),
            color: loss.color,
            mask: (stage == Stage::Three).then_some(loss.mask),
            dist: (stage == Stage::Three).then_some(loss.dist),
            total: loss.total,
            plane: state.plane,
            gaussians: state.cloud.len(),
        };
        on_row(&row);
        log_rows.push(row);
    };

    log::info!("stage 1: {} steps from {} gaussians", config.s1, state.cloud.len());
    for _ in 0..config.s1 {
        let loss = state.stage1_step(config, view(schedule.next_view()))?;
        global += 1;
        record(&state, loss, Stage::One, global, &mut log_rows);
    }
    let stage1_cloud = state.cloud.clone();

    let needs_plane = config.s2 + config.s3 > 0;
    let initial_plane = match plane {
        Some(p) => Some(p.normalized()?),
        None if needs_plane => Some(bootstrap_plane(scene, config)?),
        None => bootstrap_plane(scene, config)
            .map_err(|e| log::warn!("no plane estimated: {e}"))
            .ok(),
    };
    if let Some(p) = initial_plane {
        state.set_plane(p)?;
    }

    state.enter_stage(Stage::Two);
    log::info!("stage 2: {} steps, {} gaussians", config.s2, state.cloud.len());
    for _ in 0..config.s2 {
        let loss = state.stage2_step(config, view(schedule.next_view()))?;
        global += 1;
        record(&state, loss, Stage::Two, global, &mut log_rows);
    }

    state.enter_stage(Stage::Three);
    if config.s3 > 0 {
        state.init_labels(config.tau, config.seed)?;
    }
    log::info!("stage 3: {} steps", config.s3);
    for _ in 0..config.s3 {
        let loss = state.stage3_step(config, view(schedule.next_view()))?;
        global += 1;
        record(&state, loss, Stage::Three, global, &mut log_rows);
    }

    Ok(TrainingOutcome {
        state,
        log: log_rows,
        stage1_cloud,
        initial_plane,
    })
}
