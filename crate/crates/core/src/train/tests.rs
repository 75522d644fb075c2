use nalgebra::Vector3;

use super::*;
use crate::buffer::ImageBuf;
use crate::io::Scene;
use crate::loss::LossWeights;
use crate::mirror::MirrorPlane;
use crate::model::{logit, Camera, Gaussian, GaussianCloud};
use crate::raster::RasterSettings;
use crate::synthetic::generate_scene;

fn small_config(s1: usize, s2: usize, s3: usize) -> TrainingConfig {
    TrainingConfig {
        s1,
        s2,
        s3,
        sh_degree: 1,
        ..TrainingConfig::default()
    }
}

fn fixture() -> (crate::synthetic::SyntheticScene, Scene) {
    let syn = generate_scene(3, 4, 6);
    let scene = syn.to_scene();
    (syn, scene)
}

fn view(scene: &Scene, i: usize) -> View<'_> {
    View {
        camera: &scene.cameras[i],
        image: &scene.images[i],
        mask: &scene.masks[i],
    }
}

fn mean_color_loss(cloud: &GaussianCloud, scene: &Scene) -> f64 {
    let settings = RasterSettings::default();
    let views = scene.indices(crate::io::Split::Train);
    let total: f64 = views
        .iter()
        .map(|&i| stage1_objective(cloud, &scene.cameras[i], &scene.images[i], 0.2, &settings).unwrap().0)
        .sum();
    total / views.len() as f64
}

#[test]
fn zero_length_run_returns_initial_cloud() {
    let (_, scene) = fixture();
    let out = train(&scene, &small_config(0, 0, 0), None, |_| {}).unwrap();
    let init = init_cloud_from_sfm(&scene.sfm, 1, scene.scene_scale).unwrap();
    assert_eq!(out.state.cloud, init);
    assert!(out.log.is_empty());
}

#[test]
fn stage_one_reduces_color_loss() {
    let (_, scene) = fixture();
    let config = small_config(200, 0, 0);
    let init = init_cloud_from_sfm(&scene.sfm, 1, scene.scene_scale).unwrap();
    let before = mean_color_loss(&init, &scene);
    let out = train(&scene, &config, None, |_| {}).unwrap();
    let after = mean_color_loss(&out.state.cloud, &scene);
    assert!(after <= 0.5 * before, "L_c {before} -> {after}");
    assert!(out.log.iter().all(|r| r.total.is_finite() && r.stage == 1));
}

#[test]
fn stage_two_only_moves_the_plane() {
    let (syn, scene) = fixture();
    let mut state = TrainingState::new(syn.cloud.clone(), scene.scene_scale, 0).unwrap();
    let tilted = MirrorPlane::new(Vector3::new(0.05, 0.0, 1.0), 0.04);
    state.set_plane(tilted).unwrap();
    state.enter_stage(Stage::Two);
    let config = TrainingConfig {
        plane_lr_stage2: LrRange::new(1e-3, 1e-5),
        ..small_config(0, 5, 0)
    };
    for i in 0..5 {
        state.stage2_step(&config, view(&scene, 1 + i % 5)).unwrap();
    }
    assert_eq!(state.cloud, syn.cloud);
    assert_ne!(state.plane.unwrap(), tilted.normalized().unwrap());
}

#[test]
fn stage_two_without_mirror_pixels_keeps_plane() {
    let (syn, scene) = fixture();
    let mut state = TrainingState::new(syn.cloud.clone(), scene.scene_scale, 0).unwrap();
    state.set_plane(MirrorPlane::new(Vector3::new(0.05, 0.0, 1.0), 0.04)).unwrap();
    let start = state.plane.unwrap();
    state.enter_stage(Stage::Two);
    let ones = ImageBuf::filled(64, 64, 1, 1.0);
    let config = small_config(0, 3, 0);
    for i in 1..4 {
        let v = View { mask: &ones, ..view(&scene, i) };
        state.stage2_step(&config, v).unwrap();
    }
    assert_eq!(state.plane.unwrap(), start);
}

#[test]
fn steps_refuse_the_wrong_stage() {
    let (syn, scene) = fixture();
    let mut state = TrainingState::new(syn.cloud.clone(), scene.scene_scale, 0).unwrap();
    let config = small_config(1, 1, 1);
    assert!(matches!(state.stage2_step(&config, view(&scene, 1)), Err(crate::Error::Usage(_))));
    assert!(matches!(state.stage3_step(&config, view(&scene, 1)), Err(crate::Error::Usage(_))));
}

#[test]
fn label_gradient_active_on_false_mirror_coverage() {
    // One opaque real-labelled Gaussian covering pixels that the ground
    // truth marks as mirror.
    let camera = Camera::look_at(Vector3::new(0.0, 0.0, 5.0), Vector3::zeros(), Vector3::y(), 20.0, 16, 16);
    let mut cloud = GaussianCloud::new(0);
    let mut g = Gaussian::with_color(Vector3::new(0.0, 0.0, 1.0), Vector3::repeat(0.0), 0.99, Vector3::new(0.8, 0.2, 0.2), 0);
    g.label_logit = logit(0.99);
    cloud.gaussians.push(g);
    let plane = MirrorPlane::new(Vector3::z(), 0.0);
    let image = ImageBuf::filled(16, 16, 3, 0.3);
    let gt_mask = ImageBuf::new(16, 16, 1);
    let eval = stage3_objective(&cloud, &plane, &camera, &image, &gt_mask, &LossWeights::default(), &RasterSettings::default()).unwrap();
    assert!(eval.mask.get(8, 8, 0) > 0.9);
    assert!(eval.grads.gaussians[0].label_logit.abs() > 1e-6);
}

#[test]
fn zero_auxiliary_weights_leave_color_loss() {
    let (syn, scene) = fixture();
    let weights = LossWeights {
        lambda_mask: 0.0,
        lambda_dist: 0.0,
        ..LossWeights::default()
    };
    let v = view(&scene, 1);
    let eval = stage3_objective(&syn.cloud, &syn.plane, v.camera, v.image, v.mask, &weights, &RasterSettings::default()).unwrap();
    assert_eq!(eval.loss.total, eval.loss.color);
}

#[test]
fn view_schedule_covers_each_epoch() {
    let mut s = ViewSchedule::new(vec![1, 2, 3, 5, 8], 4).unwrap();
    let mut first: Vec<usize> = (0..5).map(|_| s.next_view()).collect();
    let second: Vec<usize> = (0..5).map(|_| s.next_view()).collect();
    assert_ne!(first, second);
    first.sort();
    assert_eq!(first, vec![1, 2, 3, 5, 8]);
    let mut again = ViewSchedule::new(vec![1, 2, 3, 5, 8], 4).unwrap();
    let replay: Vec<usize> = (0..5).map(|_| again.next_view()).collect();
    let mut s2 = ViewSchedule::new(vec![1, 2, 3, 5, 8], 4).unwrap();
    assert_eq!(replay, (0..5).map(|_| s2.next_view()).collect::<Vec<_>>());
}

#[test]
fn short_full_run_is_reproducible_and_logged() {
    let (syn, scene) = fixture();
    let config = small_config(30, 5, 10);
    let mut streamed = 0;
    let a = train(&scene, &config, Some(syn.plane), |_| streamed += 1).unwrap();
    let b = train(&scene, &config, Some(syn.plane), |_| {}).unwrap();
    assert_eq!(streamed, 45);
    assert_eq!(a.state.cloud, b.state.cloud);
    assert_eq!(a.state.plane, b.state.plane);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 45);
    assert_eq!(a.log[30].stage, 2);
    assert!(a.log[44].mask.is_some() && a.log[0].mask.is_none());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&a.log, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 46);
    assert_eq!(lines[45].split(',').count(), 10);
}

#[test]
fn plane_is_estimated_when_not_given() {
    let (syn, scene) = fixture();
    let plane = bootstrap_plane(&scene, &small_config(0, 1, 0)).unwrap();
    assert!(plane.angle_to(&syn.plane).to_degrees() < 2.0);
}
