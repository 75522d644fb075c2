//! Three-stage optimization: plain splatting, plane refinement against the
//! ground-truth masks, then joint optimization with mirror labels.

mod adam;
mod config;
mod densify;
mod objective;
mod pipeline;
mod state;

pub use adam::{AdamStep, GaussianMoments, PlaneMoments, BETA1, BETA2, EPSILON};
pub use config::{lr_schedule, DensifyConfig, GaussianLr, LrRange, TrainingConfig};
pub use densify::{DensifyOutcome, DensifyParams, OPACITY_RESET_VALUE, SPLIT_COUNT, SPLIT_SCALE_DIVISOR};
pub use objective::{
    stage1_objective, stage2_objective, stage3_loss, stage3_objective, stage3_replay, LossBreakdown, Stage2Eval,
    Stage3Eval,
};
pub use pipeline::{bootstrap_plane, train, write_loss_csv, LogRow, TrainingOutcome, View, ViewSchedule, LOSS_CSV_HEADER};
pub use state::{init_cloud_from_sfm, mean_neighbour_dist2, GaussianStepLr, Stage, TrainingState, INITIAL_OPACITY};

#[cfg(test)]
mod tests;
