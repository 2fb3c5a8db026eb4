mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use nalgebra::{Point3, Vector3};
use rand::Rng;

use sdslab::engine::*;
use sdslab::hand::{CapsuleHand, NUM_DIGITS, NUM_JOINTS};
use sdslab::render::*;
use sdslab::schedule::{AnnealingPlan, NoiseSchedule};
use sdslab::score::{LatentCodec, Noise, ViewLabel, ViewLandscape};
use sdslab::LabError;

fn cameras(size: usize, count: usize) -> Vec<Camera> {
    camera_ring(count, 3.5, &[15.0], 40.0, size, Point3::origin()).unwrap()
}

/// Hand whose capsules are all far outside the scene: every mask is empty.
fn absent_hand() -> CapsuleHand {
    let mut hand = CapsuleHand::rest();
    hand.digits = [false; NUM_DIGITS];
    hand.radii = [0.0; NUM_JOINTS - 1];
    hand.skeleton.joints = [Point3::new(50.0, 50.0, 50.0); NUM_JOINTS];
    hand.palm.clear();
    hand
}

/// Two random modes per condition key seen by `cams`, grouped by view label.
fn landscape(r: &mut impl Rng, size: usize, cams: &[Camera], hand: &CapsuleHand) -> ViewLandscape {
    let codec = LatentCodec::new(size).unwrap();
    let dim = codec.latent_dim();
    let mut keys: BTreeMap<ViewLabel, Vec<_>> = BTreeMap::new();
    for cam in cams {
        let key = condition_key(hand, cam);
        let list = keys.entry(key.view).or_default();
        if !list.contains(&key) {
            list.push(key);
        }
    }
    let mut buckets = BTreeMap::new();
    for (view, list) in keys {
        let weight = 0.5 / list.len() as f64;
        let mut modes = Vec::new();
        for key in list {
            for variant in ["five", "four"] {
                let mut m = mode((0..dim).map(|_| r.random_range(0.2..0.8)).collect(), weight, variant, 0);
                m.label.key = key;
                modes.push(m);
            }
        }
        buckets.insert(view, modes);
    }
    ViewLandscape::new(buckets, codec, Arc::new(NoiseSchedule::default())).unwrap()
}

/// Picks `count` parameters whose analytic gradient is not negligible.
fn pick(r: &mut impl Rng, grad: &FieldGradient, total: usize, count: usize) -> Vec<usize> {
    let live: Vec<usize> = (0..total).filter(|&k| grad.get(k).abs() >= 1e-8).collect();
    assert!(live.len() >= count);
    (0..count).map(|_| live[r.random_range(0..live.len())]).collect()
}

fn check_fd(field: &mut VoxelField, grad: &FieldGradient, params: &[usize], h: f64, tol: f64, f: impl Fn(&VoxelField) -> f64) {
    for &k in params {
        let orig = field.param(k);
        *field.param_mut(k) = orig + h;
        let up = f(field);
        *field.param_mut(k) = orig - h;
        let down = f(field);
        *field.param_mut(k) = orig;
        let fd = (up - down) / (2.0 * h);
        let a = grad.get(k);
        assert!((a - fd).abs() <= tol * a.abs().max(fd.abs()), "param {k}: analytic {a} fd {fd}");
    }
}

#[test]
fn chs_gradient_matches_finite_differences() {
    let mut r = rng(51);
    let mut field = random_field(&mut r, 6, 1.0, 2.0);
    let hand = CapsuleHand::rest();
    let cams = cameras(8, 3);
    let plan = AnnealingPlan::with_defaults(100).unwrap();
    let settings = RenderSettings { n_samples: 24 };
    let (_, grad) = chs_loss(&field, &hand, &cams, 450, &plan, &settings).unwrap();
    let params = pick(&mut r, &grad, field.num_params(), 30);
    check_fd(&mut field, &grad, &params, 1e-4, 1e-4, |f| chs_loss(f, &hand, &cams, 450, &plan, &settings).unwrap().0);
}

#[test]
fn chs_boundary_weights() {
    let field = VoxelField::new(6, 1.0, 2.0).unwrap();
    let hand = CapsuleHand::rest();
    let cams = cameras(8, 2);
    let plan = AnnealingPlan::with_defaults(100).unwrap();
    let settings = RenderSettings::default();
    // The empty field normalizes to zeros, so the raw error is the mask RMS.
    let e: f64 = cams
        .iter()
        .map(|c| {
            let m = sdslab::hand::silhouette_mask(&hand, c);
            (m.data.iter().sum::<f64>() / m.data.len() as f64).sqrt()
        })
        .sum::<f64>()
        / cams.len() as f64;
    let at = |t| chs_loss(&field, &hand, &cams, t, &plan, &settings).unwrap().0;
    assert!((at(600) - 15000.0 * e).abs() <= 1e-9 * at(600));
    assert!((at(300) - 1000.0 * e).abs() <= 1e-9 * at(300));
    let (zero, g) = chs_loss(&field, &absent_hand(), &cams, 600, &plan, &settings).unwrap();
    assert_eq!(zero, 0.0);
    assert!(g.is_zero());
}

#[test]
fn img_gradient_matches_finite_differences() {
    let mut r = rng(52);
    let mut field = random_field(&mut r, 6, 1.0, 2.0);
    let cam = front_camera(8);
    let settings = RenderSettings { n_samples: 24 };
    let target = sdslab::image::RgbImage::from_vec(8, (0..192).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let loss = |f: &VoxelField| img_loss(&render_view(f, &cam, &settings, None).unwrap().color_image, &target).unwrap().0;
    let render = render_view(&field, &cam, &settings, None).unwrap();
    let (_, adj_img) = img_loss(&render.color_image, &target).unwrap();
    let mut adj = RenderAdjoint::zeros(8);
    adj.color = adj_img;
    let grad = render_gradients(&field, &cam, &settings, None, &adj).unwrap();
    let params = pick(&mut r, &grad, field.num_params(), 30);
    check_fd(&mut field, &grad, &params, 1e-4, 1e-4, loss);
}

#[test]
fn zvar_gradient_matches_finite_differences() {
    let mut r = rng(53);
    let mut field = random_field(&mut r, 6, 1.0, 6.0);
    let cam = front_camera(8);
    let settings = RenderSettings { n_samples: 24 };
    let render = render_view(&field, &cam, &settings, None).unwrap();
    // Keep the foreground set away from the threshold so it is locally fixed.
    assert!(render.opacity_map.data.iter().all(|o| (o - 0.5).abs() > 1e-3));
    let (loss0, adj) = zvar_loss(&render);
    assert!(loss0 > 0.0);
    let grad = render_gradients(&field, &cam, &settings, None, &adj).unwrap();
    let params = pick(&mut r, &grad, field.num_params(), 30);
    check_fd(&mut field, &grad, &params, 1e-5, 1e-4, |f| zvar_loss(&render_view(f, &cam, &settings, None).unwrap()).0);
}

/// Two one-cell slabs perpendicular to z, each of optical depth ln 2.
fn slabs(resolution: usize, planes: &[usize], tau: f64) -> DenseGrid {
    let mut g = DenseGrid::empty(resolution, 1.0);
    let sigma = tau / g.cell_size();
    for &iz in planes {
        for iy in 0..resolution {
            for ix in 0..resolution {
                let k = g.index(ix, iy, iz);
                g.cells[k][0] = sigma;
            }
        }
    }
    g
}

#[test]
fn two_slab_depth_variance_matches_two_point_formula() {
    let n = 64;
    let g = slabs(n, &[15, 47], std::f64::consts::LN_2);
    let d = g.cell_center(0, 0, 47).z - g.cell_center(0, 0, 15).z;
    let (w1, w2) = (0.5, 0.25);
    let want = w1 * w2 * d * d / ((w1 + w2) * (w1 + w2));
    let out = march_ray(&g, &Point3::new(0.013, -0.021, 3.0), &-Vector3::z(), 1024, 0.5).unwrap();
    assert!((out.opacity - 0.75).abs() < 5e-3, "opacity {}", out.opacity);
    assert!((out.depth_var - want).abs() <= 0.02 * want, "{} vs {want}", out.depth_var);
}

#[test]
fn thin_opaque_shell_has_small_zvar() {
    let g = slabs(64, &[40], 50.0);
    let cam = Camera::new(Point3::new(0.0, 0.0, 3.0), Point3::origin(), Vector3::y(), 20.0, 8).unwrap();
    let render = render_grid(&g, &cam, &RenderSettings { n_samples: 256 }, None).unwrap();
    assert!(render.opacity_map.data.iter().all(|o| *o > 0.99));
    let (loss, _) = zvar_loss(&render);
    assert!(loss < 1e-3, "zvar {loss}");
    let (empty, _) = zvar_loss(&render_grid(&DenseGrid::empty(8, 1.0), &cam, &RenderSettings::default(), None).unwrap());
    assert_eq!(empty, 0.0);
}

#[test]
fn sds_gradient_is_the_latent_residual_pulled_back() {
    let mut r = rng(54);
    let size = 16;
    let mut field = random_field(&mut r, 6, 1.0, 2.0);
    let hand = CapsuleHand::rest();
    let cam = front_camera(size);
    let land = landscape(&mut r, size, std::slice::from_ref(&cam), &hand);
    let plan = AnnealingPlan::with_defaults(100).unwrap();
    let settings = RenderSettings { n_samples: 24 };
    let (grad, step) = sds_step(&field, &land, &hand, &cam, 10, &plan, true, &settings, &mut rng(7)).unwrap();
    let (grad2, step2) = sds_step(&field, &land, &hand, &cam, 10, &plan, true, &settings, &mut rng(7)).unwrap();
    assert_eq!(grad, grad2);
    assert_eq!(step.latent_grad, step2.latent_grad);
    let codec = *land.codec();
    let pairing = |f: &VoxelField| {
        let z = codec.encode(&render_view(f, &cam, &settings, None).unwrap().color_image).unwrap();
        z.iter().zip(&step.latent_grad).map(|(a, b)| a * b).sum::<f64>()
    };
    let params = pick(&mut r, &grad, field.num_params(), 20);
    check_fd(&mut field, &grad, &params, 1e-4, 1e-3, pairing);
}

#[test]
fn sds_vanishes_at_the_sole_conditioned_mode_without_noise() {
    let mut r = rng(55);
    let size = 16;
    let field = random_field(&mut r, 6, 1.0, 2.0);
    let hand = CapsuleHand::rest();
    let cam = front_camera(size);
    let codec = LatentCodec::new(size).unwrap();
    let z = codec.encode(&render_view(&field, &cam, &RenderSettings::default(), None).unwrap().color_image).unwrap();
    let key = condition_key(&hand, &cam);
    let mut m = mode(z, 1.0, "five", key.skeleton_hash);
    m.label.key = key;
    let land = ViewLandscape::new(BTreeMap::from([(ViewLabel::of_camera(&cam), vec![m])]), codec, Arc::new(NoiseSchedule::default())).unwrap();
    let image = render_view(&field, &cam, &RenderSettings::default(), None).unwrap().color_image;
    for t in [1, 300, 600, 1000] {
        let step = distill_view(&image, &land, &hand, &cam, t, true, &mut Noise::Zero).unwrap();
        assert!(step.latent_grad.iter().all(|g| g.abs() < 1e-12));
        let back = step.denoised(&land).unwrap();
        assert!(back.iter().zip(&step.z).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

#[test]
fn render_gradients_are_linear_in_the_adjoint() {
    let mut r = rng(56);
    let field = random_field(&mut r, 5, 1.0, 3.0);
    let cam = front_camera(8);
    let settings = RenderSettings::default();
    let draw = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut a = RenderAdjoint::zeros(8);
        for v in a.color.data.iter_mut().chain(a.opacity.data.iter_mut()).chain(a.depth_var.data.iter_mut()) {
            *v = r.random_range(-1.0..1.0);
        }
        a
    };
    let (a1, a2) = (draw(&mut r), draw(&mut r));
    let (s1, s2) = (0.37, 120.0);
    let mut combined = RenderAdjoint::zeros(8);
    combined.add_scaled(&a1, s1);
    combined.add_scaled(&a2, s2);
    let g = render_gradients(&field, &cam, &settings, None, &combined).unwrap();
    let mut sum = render_gradients(&field, &cam, &settings, None, &a1).unwrap();
    sum = {
        let mut s = FieldGradient::zeros(field.num_cells());
        s.add_scaled(&sum, s1);
        s.add_scaled(&render_gradients(&field, &cam, &settings, None, &a2).unwrap(), s2);
        s
    };
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in g.iter().zip(sum.iter()) {
        assert!((x - y).abs() <= 1e-12 * scale.max(1.0));
    }
}

struct Toy {
    field: VoxelField,
    hand: CapsuleHand,
    cams: Vec<Camera>,
    land: ViewLandscape,
}

fn toy(seed: u64) -> Toy {
    let mut r = rng(seed);
    let size = 16;
    let mut field = random_field(&mut r, 10, 1.2, 4.0);
    for v in field.raw_density.iter_mut() {
        *v -= 2.0;
    }
    let hand = CapsuleHand::rest();
    let cams = cameras(size, 4);
    let land = landscape(&mut r, size, &cams, &hand);
    Toy { field, hand, cams, land }
}

fn stage2(t: &mut Toy, iters: usize, options: &Stage2Options, seed: u64) -> sdslab::Result<StageReport> {
    let plan = AnnealingPlan::with_defaults(iters).unwrap();
    optimize_stage2(&mut t.field, &t.land, &t.hand, &t.cams, &plan, options, &mut rng(seed))
}

#[test]
fn stage2_is_deterministic_and_records_the_annealed_weight() {
    let mut a = toy(57);
    let mut b = toy(57);
    let opts = Stage2Options::default();
    let ra = stage2(&mut a, 24, &opts, 9).unwrap();
    let rb = stage2(&mut b, 24, &opts, 9).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.field, b.field);
    assert_eq!(ra.len(), 24);
    let plan = AnnealingPlan::with_defaults(24).unwrap();
    for rec in &ra.records {
        assert_eq!(rec.lambda_chs, plan.lambda_chs_at_iter(rec.iter).unwrap());
        assert_eq!(rec.t, plan.timestep_at(rec.iter).unwrap());
        assert!(rec.loss_sds > 0.0 && rec.loss_img > 0.0);
    }
}

#[test]
fn disabled_terms_record_zero_and_contribute_nothing() {
    let mut only_chs = toy(58);
    let mut zero_weighted = toy(58);
    let chs = Stage2Options {
        toggles: LossToggles { sds: false, chs: true, img: false, zvar: false },
        ..Default::default()
    };
    let weighted = Stage2Options {
        weights: LossWeights { sds: 0.0, img: 0.0, zvar: 0.0 },
        ..Default::default()
    };
    let ra = stage2(&mut only_chs, 16, &chs, 1).unwrap();
    stage2(&mut zero_weighted, 16, &weighted, 2).unwrap();
    assert_eq!(only_chs.field, zero_weighted.field);
    for rec in &ra.records {
        assert_eq!((rec.loss_sds, rec.loss_img, rec.loss_zvar), (0.0, 0.0, 0.0));
        assert!(rec.loss_chs > 0.0);
    }
}

#[test]
fn zero_weights_leave_parameters_untouched() {
    let mut t = toy(59);
    let before = t.field.clone();
    let opts = Stage2Options {
        weights: LossWeights { sds: 0.0, img: 0.0, zvar: 0.0 },
        toggles: LossToggles { chs: false, ..Default::default() },
        ..Default::default()
    };
    stage2(&mut t, 12, &opts, 3).unwrap();
    assert_eq!(t.field, before);
}

#[test]
fn non_finite_field_aborts_with_divergence() {
    let mut t = toy(60);
    t.field.raw_color[5] = f64::NAN;
    t.field.raw_density.iter_mut().for_each(|v| *v = 1.0);
    let err = stage2(&mut t, 8, &Stage2Options::default(), 4).unwrap_err();
    assert!(matches!(err, LabError::Divergence { iter: 0, .. }), "{err}");
    let bad = Stage2Options {
        weights: LossWeights { sds: -1.0, ..Default::default() },
        ..Default::default()
    };
    assert!(matches!(stage2(&mut toy(60), 8, &bad, 4), Err(LabError::Config(_))));
}

#[test]
fn chs_only_run_decreases_smoothed_loss() {
    let size = 32;
    let hand = CapsuleHand::rest();
    // Ten cameras so the smoothing window spans whole round-robin cycles.
    let cams = cameras(size, 10);
    let mut r = rng(61);
    let land = landscape(&mut r, size, &cams, &hand);
    let mut field = VoxelField::new(24, 1.2, 40.0).unwrap();
    let grid = field.activate();
    for iz in 0..24 {
        for iy in 0..24 {
            for ix in 0..24 {
                let k = grid.index(ix, iy, iz);
                if grid.cell_center(ix, iy, iz).coords.norm() < 0.8 {
                    field.raw_density[k] = inverse_softplus(1.5 / 40.0);
                }
            }
        }
    }
    let opts = Stage2Options {
        toggles: LossToggles { sds: false, chs: true, img: false, zvar: false },
        stage: StageOptions { settings: RenderSettings { n_samples: 48 }, ..Default::default() },
        ..Default::default()
    };
    let plan = AnnealingPlan::with_defaults(400).unwrap();
    let report = optimize_stage2(&mut field, &land, &hand, &cams, &plan, &opts, &mut rng(5)).unwrap();
    let losses: Vec<f64> = report.records.iter().map(|r| r.loss_chs).collect();
    let smooth: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "smoothed loss rose {} -> {}", w[0], w[1]);
    }
    assert!(smooth[smooth.len() - 1] < 0.75 * smooth[0], "{} -> {}", smooth[0], smooth[smooth.len() - 1]);
}

#[test]
fn stage1_on_empty_target_from_empty_field_is_exact() {
    // Below the skipping threshold the field renders exactly transparent, the
    // normalized maps are identically zero and nothing moves.
    let mut field = VoxelField::new(12, 1.2, 40.0).unwrap();
    let before = field.clone();
    let cams = cameras(16, 4);
    let report = init_stage(&mut field, &absent_hand(), &cams, 100, &StageOptions::default()).unwrap();
    assert_eq!(report.len(), 100);
    assert!(report.records.iter().all(|r| r.loss_chs == 0.0));
    assert_eq!(field, before);
    assert!(matches!(init_stage(&mut field, &absent_hand(), &[], 1, &StageOptions::default()), Err(LabError::Domain(_))));
    assert!(matches!(init_stage(&mut field, &absent_hand(), &cams, 0, &StageOptions::default()), Err(LabError::Domain(_))));
}

#[test]
fn normalized_silhouette_error_is_scale_invariant_for_faint_fields() {
    // Min-max normalization removes any common density factor in the faint
    // limit, so shrinking density is not a descent direction for stage 1.
    let mut r = rng(62);
    let faint = random_field(&mut r, 8, 1.0, 1e-4);
    let mut fainter = faint.clone();
    fainter.density_scale *= 0.5;
    let cams = cameras(16, 3);
    let hand = CapsuleHand::rest();
    let a = silhouette_error(&faint, &hand, &cams, &RenderSettings::default()).unwrap();
    let b = silhouette_error(&fainter, &hand, &cams, &RenderSettings::default()).unwrap();
    assert!((a - b).abs() < 1e-3 * a, "{a} vs {b}");
}
