use super::blend::{rasterize, rasterize_backward, Splat};
use super::*;
use crate::mirror::MirrorPlane;
use crate::model::{Camera, Gaussian, GaussianCloud};
use approx::assert_relative_eq;
use nalgebra::{Matrix2, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splat_at(x: f64, y: f64, depth: f64, opacity: f64, color: Vector3<f64>, label: f64, order: usize) -> Splat {
    Splat {
        mean2d: Vector2::new(x, y),
        conic: Matrix2::identity(),
        depth,
        radius: 3.0,
        color,
        opacity,
        label,
        order,
    }
}

#[test]
fn single_opaque_splat() {
    let c = Vector3::new(0.2, 0.5, 0.9);
    let s = vec![splat_at(4.5, 4.5, 1.0, 1.0, c, 1.0, 0)];
    let (out, _) = rasterize(&s, 8, 8, RenderMode::Standard, &RasterSettings::default());
    for ch in 0..3 {
        assert_eq!(out.color.get(4, 4, ch), c[ch]);
    }
    assert_eq!(out.mask.get(4, 4, 0), 1.0);
    assert_eq!(out.final_transmittance.get(4, 4, 0), 0.0);
}

#[test]
fn two_half_transparent_splats() {
    let c1 = Vector3::new(1.0, 0.0, 0.0);
    let c2 = Vector3::new(0.0, 1.0, 0.5);
    // Inserted back first to check the depth sort.
    let s = vec![splat_at(2.5, 2.5, 3.0, 0.5, c2, 1.0, 0), splat_at(2.5, 2.5, 1.0, 0.5, c1, 1.0, 1)];
    let (out, _) = rasterize(&s, 8, 8, RenderMode::Standard, &RasterSettings::default());
    let expect = c1 * 0.5 + c2 * 0.25;
    for ch in 0..3 {
        assert_relative_eq!(out.color.get(2, 2, ch), expect[ch], epsilon = 1e-15);
    }
    assert_relative_eq!(out.final_transmittance.get(2, 2, 0), 0.25, epsilon = 1e-15);
}

#[test]
fn mirror_label_zeroes_color_and_mask() {
    let s = vec![splat_at(4.5, 4.5, 1.0, 1.0, Vector3::repeat(0.7), 0.0, 0)];
    let (out, _) = rasterize(&s, 8, 8, RenderMode::LabelModulated, &RasterSettings::default());
    for ch in 0..3 {
        assert_eq!(out.color.get(4, 4, ch), 0.0);
    }
    assert_eq!(out.mask.get(4, 4, 0), 0.0);
    assert_eq!(out.final_transmittance.get(4, 4, 0), 1.0);
}

#[test]
fn empty_pixel_is_background() {
    let s = vec![splat_at(1.5, 1.5, 1.0, 1.0, Vector3::repeat(0.7), 1.0, 0)];
    let (out, _) = rasterize(&s, 32, 32, RenderMode::Standard, &RasterSettings::default());
    assert_eq!(out.color.get(25, 25, 0), 0.0);
    assert_eq!(out.mask.get(25, 25, 0), 0.0);
    assert_eq!(out.final_transmittance.get(25, 25, 0), 1.0);

    let settings = RasterSettings {
        background: Vector3::new(0.1, 0.2, 0.3),
        ..RasterSettings::default()
    };
    let (out, _) = rasterize(&s, 32, 32, RenderMode::Standard, &settings);
    assert_eq!(out.color.get(25, 25, 2), 0.3);
}

#[test]
fn weights_and_transmittance_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let splats: Vec<Splat> = (0..30)
        .map(|i| {
            let mut s = splat_at(
                rng.gen_range(0.0..20.0),
                rng.gen_range(0.0..20.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.05..0.99),
                Vector3::repeat(1.0),
                1.0,
                i,
            );
            s.conic = Matrix2::identity() * rng.gen_range(0.05..0.5);
            s.radius = 12.0;
            s
        })
        .collect();
    let (out, _) = rasterize(&splats, 20, 20, RenderMode::Standard, &RasterSettings::default());
    for y in 0..20 {
        for x in 0..20 {
            // With unit colors and labels, C and K are the summed weights.
            let t = out.final_transmittance.get(x, y, 0);
            assert!((out.color.get(x, y, 0) + t - 1.0).abs() < 1e-6);
            assert!((out.mask.get(x, y, 0) + t - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&t));
        }
    }
}

#[test]
fn equal_depth_ties_break_by_order() {
    let a = splat_at(2.5, 2.5, 1.0, 0.5, Vector3::x(), 1.0, 0);
    let b = splat_at(2.5, 2.5, 1.0, 0.5, Vector3::y(), 1.0, 1);
    let (o1, _) = rasterize(&[a.clone(), b.clone()], 4, 4, RenderMode::Standard, &RasterSettings::default());
    let (o2, _) = rasterize(&[b, a], 4, 4, RenderMode::Standard, &RasterSettings::default());
    assert_eq!(o1.color, o2.color);
    assert_eq!(o1.color.get(2, 2, 0), 0.5);
}

#[test]
fn composite_examples() {
    let w = 3;
    let h = 2;
    let mut real = RenderOutput::empty(w, h);
    let mut mirror = RenderOutput::empty(w, h);
    real.color = ImageBuf::from_fn(w, h, 3, |x, y, c| (x + 2 * y + c) as f64 * 0.1);
    mirror.color = ImageBuf::from_fn(w, h, 3, |x, y, c| 1.0 - (x * y + c) as f64 * 0.05);
    let ones = ImageBuf::filled(w, h, 1, 1.0);
    let zeros = ImageBuf::filled(w, h, 1, 0.0);
    let half = ImageBuf::filled(w, h, 1, 0.5);
    assert_eq!(composite(&real, &mirror, &ones).unwrap(), real.color);
    assert_eq!(composite(&real, &mirror, &zeros).unwrap(), mirror.color);
    let avg = composite(&real, &mirror, &half).unwrap();
    for (i, v) in avg.data.iter().enumerate() {
        assert_relative_eq!(*v, 0.5 * (real.color.data[i] + mirror.color.data[i]), epsilon = 1e-15);
    }
    let bad = ImageBuf::filled(w + 1, h, 1, 0.5);
    assert!(matches!(composite(&real, &mirror, &bad), Err(Error::DimensionMismatch(_))));
}

#[test]
fn composite_backward_matches_definition() {
    let real = ImageBuf::from_fn(2, 2, 3, |x, y, c| 0.1 * (x + y + c) as f64);
    let mirror = ImageBuf::from_fn(2, 2, 3, |x, _, c| 0.3 + 0.2 * (x * c) as f64);
    let mask = ImageBuf::from_fn(2, 2, 1, |x, y, _| 0.25 * (x + 2 * y) as f64);
    let grad = ImageBuf::from_fn(2, 2, 3, |x, y, c| 1.0 + (x + y * c) as f64);
    let (gr, gm, gk) = composite_backward(&real, &mirror, &mask, &grad).unwrap();
    let f = |r: &ImageBuf, m: &ImageBuf, k: &ImageBuf| {
        let o = composite_images(r, m, k).unwrap();
        o.data.iter().zip(&grad.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let h = 1e-6;
    let mut k2 = mask.clone();
    k2.data[3] += h;
    let fd = (f(&real, &mirror, &k2) - f(&real, &mirror, &mask)) / h;
    assert_relative_eq!(fd, gk.data[3], epsilon = 1e-6);
    assert_relative_eq!(gr.data[5], grad.data[5] * mask.data[1]);
    assert_relative_eq!(gm.data[5], grad.data[5] * (1.0 - mask.data[1]));
}

fn test_camera() -> Camera {
    Camera::look_at(Vector3::new(0.3, -3.0, 2.5), Vector3::zeros(), Vector3::z(), 14.0, 16, 16)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(degree);
    let ncoef = (degree + 1) * (degree + 1);
    for _ in 0..n {
        let mean = Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(0.1..0.9));
        let mut g = Gaussian::with_color(
            mean,
            Vector3::new(rng.gen_range(-1.8..-1.0), rng.gen_range(-1.8..-1.0), rng.gen_range(-1.8..-1.0)),
            rng.gen_range(0.3..0.8),
            Vector3::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)),
            degree,
        );
        g.rotation = Vector4::new(
            rng.gen_range(0.5..1.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        for k in 1..ncoef {
            g.sh[k] = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        }
        g.label_logit = rng.gen_range(-2.0..2.0);
        cloud.gaussians.push(g);
    }
    cloud
}

struct Weights {
    color: ImageBuf,
    mask: ImageBuf,
    trans: ImageBuf,
}

fn weights(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Weights {
    Weights {
        color: ImageBuf::from_fn(w, h, 3, |_, _, _| rng.gen_range(-1.0..1.0)),
        mask: ImageBuf::from_fn(w, h, 1, |_, _, _| rng.gen_range(-1.0..1.0)),
        trans: ImageBuf::from_fn(w, h, 1, |_, _, _| rng.gen_range(-1.0..1.0)),
    }
}

fn dot(a: &ImageBuf, b: &ImageBuf) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn objective(out: &RenderOutput, w: &Weights) -> f64 {
    dot(&out.color, &w.color) + dot(&out.mask, &w.mask) + dot(&out.final_transmittance, &w.trans)
}

fn check(analytic: f64, fd: f64, what: &str) {
    let err = (analytic - fd).abs();
    assert!(err <= 1e-3 * fd.abs().max(analytic.abs()) || err <= 1e-5, "{what}: analytic {analytic} fd {fd}");
}

fn fd_check_pass(mode: RenderMode, plane: Option<MirrorPlane>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng, 10, 2);
    let cam = test_camera();
    let w = weights(&mut rng, 16, 16);
    let settings = RasterSettings::default();
    let (_, ctx) = render(&cloud, &cam, mode, plane.as_ref(), &settings).unwrap();
    assert!(ctx.trace().num_contributions() > 0);
    let grad = RenderGrad {
        color: Some(w.color.clone()),
        mask: Some(w.mask.clone()),
        transmittance: Some(w.trans.clone()),
    };
    let g = render_backward(&ctx, &cloud, &grad).unwrap();
    let h = 1e-4;
    let eval = |c: &GaussianCloud, p: Option<&MirrorPlane>| objective(&render_replay(&ctx, c, p).unwrap(), &w);
    let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);

    for &i in ctx.visible_indices() {
        let gg = &g.gaussians[i];
        for k in 0..3 {
            let fd = central(&|e| {
                let mut c = cloud.clone();
                c.gaussians[i].mean[k] += e;
                eval(&c, plane.as_ref())
            });
            check(gg.mean[k], fd, "mean");
            let fd = central(&|e| {
                let mut c = cloud.clone();
                c.gaussians[i].log_scale[k] += e;
                eval(&c, plane.as_ref())
            });
            check(gg.log_scale[k], fd, "log_scale");
        }
        for k in 0..4 {
            let fd = central(&|e| {
                let mut c = cloud.clone();
                c.gaussians[i].rotation[k] += e;
                eval(&c, plane.as_ref())
            });
            check(gg.rotation[k], fd, "rotation");
        }
        let fd = central(&|e| {
            let mut c = cloud.clone();
            c.gaussians[i].opacity_logit += e;
            eval(&c, plane.as_ref())
        });
        check(gg.opacity_logit, fd, "opacity");
        let fd = central(&|e| {
            let mut c = cloud.clone();
            c.gaussians[i].label_logit += e;
            eval(&c, plane.as_ref())
        });
        check(gg.label_logit, fd, "label");
        for k in 0..cloud.gaussians[i].sh.len() {
            for ch in 0..3 {
                let fd = central(&|e| {
                    let mut c = cloud.clone();
                    c.gaussians[i].sh[k][ch] += e;
                    eval(&c, plane.as_ref())
                });
                check(gg.sh[k][ch], fd, "sh");
            }
        }
    }
    if let Some(p) = plane {
        for k in 0..3 {
            let fd = central(&|e| {
                let mut q = p;
                q.normal[k] += e;
                eval(&cloud, Some(&q))
            });
            check(g.plane.normal[k], fd, "plane normal");
        }
        let fd = central(&|e| {
            let mut q = p;
            q.offset += e;
            eval(&cloud, Some(&q))
        });
        check(g.plane.offset, fd, "plane offset");
    }
}

fn tilted_plane() -> MirrorPlane {
    MirrorPlane::new(Vector3::new(0.1, -0.3, 1.0), 0.05)
}

#[test]
fn gradients_standard_mode() {
    fd_check_pass(RenderMode::Standard, None, 11);
}

#[test]
fn gradients_label_mode() {
    fd_check_pass(RenderMode::LabelModulated, None, 12);
}

#[test]
fn gradients_mask_only() {
    fd_check_pass(RenderMode::MaskOnly, None, 13);
}

#[test]
fn gradients_mirrored_pass() {
    // Mirror the cloud into view: the camera looks at the reflection.
    fd_check_pass(RenderMode::Standard, Some(tilted_plane()), 14);
    fd_check_pass(RenderMode::LabelModulated, Some(tilted_plane()), 15);
}

#[test]
fn single_gaussian_opacity_gradient() {
    let cam = test_camera();
    let mut cloud = GaussianCloud::new(0);
    cloud
        .gaussians
        .push(Gaussian::with_color(Vector3::new(0.0, 0.0, 0.2), Vector3::repeat(-1.2), 0.6, Vector3::new(0.3, 0.6, 0.9), 0));
    let settings = RasterSettings::default();
    let (out, ctx) = render(&cloud, &cam, RenderMode::Standard, None, &settings).unwrap();
    let (px, py) = (8, 8);
    assert!(out.color.get(px, py, 1) > 0.0);
    let mut gc = ImageBuf::new(16, 16, 3);
    gc.set(px, py, 1, 1.0);
    let g = render_backward(&ctx, &cloud, &RenderGrad::color(gc)).unwrap();
    let h = 1e-4;
    let f = |e: f64| {
        let mut c = cloud.clone();
        c.gaussians[0].opacity_logit += e;
        render(&c, &cam, RenderMode::Standard, None, &settings).unwrap().0.color.get(px, py, 1)
    };
    let fd = (f(h) - f(-h)) / (2.0 * h);
    assert!((g.gaussians[0].opacity_logit - fd).abs() <= 1e-4 * fd.abs());
}

#[test]
fn culled_gaussian_has_zero_gradient() {
    let cam = test_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cloud = random_cloud(&mut rng, 4, 1);
    // Behind the camera.
    cloud.gaussians[2].mean = cam.center() * 2.0;
    let (_, ctx) = render(&cloud, &cam, RenderMode::Standard, None, &RasterSettings::default()).unwrap();
    assert!(!ctx.visible_indices().contains(&2));
    let g = render_backward(&ctx, &cloud, &RenderGrad::color(ImageBuf::filled(16, 16, 3, 1.0))).unwrap();
    assert_eq!(g.gaussians[2], GaussianGrad::zeros(cloud.gaussians[2].sh.len()));
    assert!(!g.visible[2]);
}

#[test]
fn non_finite_parameter_is_reported() {
    let cam = test_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cloud = random_cloud(&mut rng, 5, 0);
    cloud.gaussians[3].log_scale[1] = f64::NAN;
    let err = render(&cloud, &cam, RenderMode::Standard, None, &RasterSettings::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 3, .. }));
}

#[test]
fn mismatched_context_is_usage_error() {
    let cam = test_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = random_cloud(&mut rng, 5, 0);
    let (_, ctx) = render(&cloud, &cam, RenderMode::Standard, None, &RasterSettings::default()).unwrap();
    let smaller = random_cloud(&mut rng, 4, 0);
    let err = render_backward(&ctx, &smaller, &RenderGrad::default()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn replay_reproduces_forward() {
    let cam = test_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = random_cloud(&mut rng, 12, 1);
    let plane = tilted_plane();
    for p in [None, Some(&plane)] {
        let (out, ctx) = render(&cloud, &cam, RenderMode::LabelModulated, p, &RasterSettings::default()).unwrap();
        let again = render_replay(&ctx, &cloud, p).unwrap();
        assert_eq!(out, again);
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let cam = Camera::look_at(Vector3::new(0.3, -3.0, 2.5), Vector3::zeros(), Vector3::z(), 40.0, 48, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_cloud(&mut rng, 40, 1);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (out, ctx) = render(&cloud, &cam, RenderMode::LabelModulated, None, &RasterSettings::default()).unwrap();
            let g = rasterize_backward(
                &ctx.splats_for_test(),
                ctx.trace(),
                &RasterSettings::default(),
                &RenderGrad::color(ImageBuf::filled(48, 40, 3, 1.0)),
            )
            .unwrap();
            (out, g)
        })
    };
    let (o1, g1) = run(1);
    let (o4, g4) = run(4);
    assert_eq!(o1, o4);
    assert_eq!(g1, g4);
}
