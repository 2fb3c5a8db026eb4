mod common;

use common::*;
use nalgebra::{Point3, Vector3};
use proptest::prelude::*;
use rand::Rng;

use sdslab::image::{decode_depth, encode_depth, GrayImage};
use sdslab::render::*;
use sdslab::LabError;

/// <adjoint, outputs> recomputed from a plain forward render.
fn functional(field: &VoxelField, cam: &Camera, settings: &RenderSettings, jitter: Option<&Jitter>, adj: &RenderAdjoint) -> f64 {
    let r = render_view(field, cam, settings, jitter).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&r.color_image.data, &adj.color.data)
        + dot(&r.opacity_map.data, &adj.opacity.data)
        + dot(&r.depth_map.data, &adj.depth.data)
        + dot(&r.depth_variance.data, &adj.depth_var.data)
}

fn random_adjoint(r: &mut impl Rng, size: usize) -> RenderAdjoint {
    let mut a = RenderAdjoint::zeros(size);
    for v in a
        .color
        .data
        .iter_mut()
        .chain(a.opacity.data.iter_mut())
        .chain(a.depth.data.iter_mut())
        .chain(a.depth_var.data.iter_mut())
    {
        *v = r.random_range(-1.0..1.0);
    }
    a
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(31);
    let mut field = random_field(&mut r, 6, 1.0, 2.0);
    let cam = front_camera(8);
    let settings = RenderSettings { n_samples: 24 };
    let jitter = Jitter::draw(&mut r, 64);
    let adj = random_adjoint(&mut r, 8);
    let grad = render_gradients(&field, &cam, &settings, Some(&jitter), &adj).unwrap();
    let candidates: Vec<usize> = (0..field.num_params()).filter(|&k| grad.get(k).abs() >= 1e-8).collect();
    assert!(candidates.len() >= 50);
    let h = 1e-3;
    for _ in 0..50 {
        let k = candidates[r.random_range(0..candidates.len())];
        let orig = field.param(k);
        *field.param_mut(k) = orig + h;
        let up = functional(&field, &cam, &settings, Some(&jitter), &adj);
        *field.param_mut(k) = orig - h;
        let down = functional(&field, &cam, &settings, Some(&jitter), &adj);
        *field.param_mut(k) = orig;
        let fd = (up - down) / (2.0 * h);
        let a = grad.get(k);
        assert!((a - fd).abs() <= 1e-4 * fd.abs().max(a.abs()), "param {k}: analytic {a} fd {fd}");
    }
}

#[test]
fn taped_and_direct_gradients_agree() {
    let mut r = rng(32);
    let field = random_field(&mut r, 5, 1.0, 3.0);
    let grid = field.activate();
    let cam = front_camera(8);
    let settings = RenderSettings::default();
    let adj = random_adjoint(&mut r, 8);
    let mut tape = RenderTape::default();
    let out = render_grid_taped(&grid, &cam, &settings, None, &mut tape).unwrap();
    assert_eq!(out, render_grid(&grid, &cam, &settings, None).unwrap());
    let a = tape_gradients(&grid, &tape, &adj).unwrap();
    let b = render_grid_gradients(&grid, &cam, &settings, None, &adj).unwrap();
    assert_eq!(a, b);
}

#[test]
fn transmittance_is_conserved_on_random_rays() {
    let mut r = rng(33);
    let field = random_field(&mut r, 8, 1.0, 4.0);
    let grid = field.activate();
    for _ in 0..1000 {
        let origin = Point3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(2.0..4.0));
        let target = Point3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let dir = (target - origin).normalize();
        let n = r.random_range(2..96);
        let out = march_ray(&grid, &origin, &dir, n, r.random_range(0.0..1.0)).unwrap();
        let total: f64 = out.weights.iter().sum();
        assert!((out.transmittance + total - 1.0).abs() <= 1e-10);
        assert!((out.opacity - total).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&out.opacity));
    }
}

#[test]
fn march_ray_examples() {
    let mut grid = DenseGrid::empty(4, 1.0);
    let origin = Point3::new(0.0, 0.0, 3.0);
    let dir = -Vector3::z();
    let empty = march_ray(&grid, &origin, &dir, 16, 0.5).unwrap();
    assert_eq!(empty.opacity, 0.0);
    assert_eq!(empty.color, [0.0; 3]);
    assert!(empty.weights.iter().all(|w| *w == 0.0));

    for c in grid.cells.iter_mut() {
        *c = [1e4, 0.2, 0.4, 0.6];
    }
    let opaque = march_ray(&grid, &origin, &dir, 16, 0.5).unwrap();
    assert!((opaque.opacity - 1.0).abs() < 1e-12);
    for (got, want) in opaque.color.iter().zip([0.2, 0.4, 0.6]) {
        assert!((got - want).abs() < 1e-9);
    }
    assert!(matches!(march_ray(&grid, &origin, &Vector3::new(0.0, 0.0, -2.0), 16, 0.5), Err(LabError::Domain(_))));
}

#[test]
fn opacity_is_bounded_and_monotone_in_density() {
    let mut r = rng(34);
    let cam = front_camera(12);
    let settings = RenderSettings { n_samples: 32 };
    for _ in 0..10 {
        let scale = r.random_range(0.1..20.0);
        let field = random_field(&mut r, 6, 1.0, scale);
        let mut denser = field.clone();
        for v in denser.raw_density.iter_mut() {
            if r.random_bool(0.3) {
                *v += r.random_range(0.0..2.0);
            }
        }
        let a = render_view(&field, &cam, &settings, None).unwrap();
        let b = render_view(&denser, &cam, &settings, None).unwrap();
        for (x, y) in a.opacity_map.data.iter().zip(&b.opacity_map.data) {
            assert!((0.0..=1.0).contains(x));
            assert!(*y >= *x - 1e-12);
        }
        for c in &a.color_image.data {
            assert!((0.0..=1.0 + 1e-12).contains(c));
        }
    }
}

/// Gaussian blob of density at cell centers.
fn blob(resolution: usize, peak: f64, width: f64) -> DenseGrid {
    let mut g = DenseGrid::empty(resolution, 1.0);
    for iz in 0..resolution {
        for iy in 0..resolution {
            for ix in 0..resolution {
                let p = g.cell_center(ix, iy, iz);
                let k = g.index(ix, iy, iz);
                g.cells[k][0] = peak * (-p.coords.norm_squared() / (2.0 * width * width)).exp();
            }
        }
    }
    g
}

#[test]
fn doubling_samples_barely_changes_a_smooth_field() {
    let grid = blob(24, 3.0, 0.4);
    let cam = front_camera(16);
    let a = render_grid(&grid, &cam, &RenderSettings { n_samples: 64 }, None).unwrap();
    let b = render_grid(&grid, &cam, &RenderSettings { n_samples: 128 }, None).unwrap();
    let mut worst: f64 = 0.0;
    for (x, y) in a.opacity_map.data.iter().zip(&b.opacity_map.data) {
        if *y > 0.05 {
            worst = worst.max((x - y).abs() / y);
        }
    }
    assert!(worst < 0.02, "worst relative change {worst}");
}

#[test]
fn ball_normalizes_to_one_inside_and_zero_at_corners() {
    let mut grid = DenseGrid::empty(16, 1.0);
    for iz in 0..16 {
        for iy in 0..16 {
            for ix in 0..16 {
                if grid.cell_center(ix, iy, iz).coords.norm() < 0.5 {
                    let k = grid.index(ix, iy, iz);
                    grid.cells[k][0] = 200.0;
                }
            }
        }
    }
    let cam = Camera::new(Point3::new(0.0, 0.0, 4.0), Point3::origin(), Vector3::y(), 40.0, 16).unwrap();
    let out = render_grid(&grid, &cam, &RenderSettings::default(), None).unwrap();
    let n = &out.normalized_opacity;
    assert_eq!(n.get(0, 0), 0.0);
    assert_eq!(n.get(15, 15), 0.0);
    assert!((n.get(8, 8) - 1.0).abs() < 1e-9);
    let lo = n.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = n.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));
}

#[test]
fn empty_field_renders_white_and_transparent() {
    let field = VoxelField::new(4, 1.0, 1.0).unwrap();
    let out = render_view(&field, &front_camera(8), &RenderSettings::default(), None).unwrap();
    assert!(out.opacity_map.data.iter().all(|v| *v == 0.0));
    assert!(out.normalized_opacity.data.iter().all(|v| *v == 0.0));
    assert!(out.color_image.data.iter().all(|v| *v == 1.0));
}

#[test]
fn normalized_opacity_backward_matches_finite_differences() {
    let mut r = rng(35);
    let raw = GrayImage { size: 4, data: (0..16).map(|_| r.random_range(0.0..1.0)).collect() };
    let adj: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |x: &[f64]| {
        let n = min_max_normalize(&GrayImage { size: 4, data: x.to_vec() });
        n.data.iter().zip(&adj).map(|(a, b)| a * b).sum::<f64>()
    };
    let fd = central_gradient(f, &raw.data, 1e-7);
    let got = normalized_opacity_backward(&raw, &adj);
    assert!(rel_err(&got, &fd) < 1e-6);
}

#[test]
fn adjoint_shape_mismatch_is_reported() {
    let field = VoxelField::new(4, 1.0, 1.0).unwrap();
    let err = render_gradients(&field, &front_camera(8), &RenderSettings::default(), None, &RenderAdjoint::zeros(4));
    assert!(matches!(err, Err(LabError::Shape { .. })));
}

#[test]
fn depth_file_round_trip() {
    let img = GrayImage { size: 3, data: (0..9).map(|k| k as f64 * 0.25).collect() };
    let bytes = encode_depth(&img);
    assert_eq!(&bytes[..12], b"SDSLAB-DEPTH");
    assert_eq!(decode_depth(&bytes, "mem").unwrap(), img);
    assert!(decode_depth(&bytes[..10], "mem").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conservation_and_bounds_hold_for_any_field(seed in 0u64..10_000, scale in 0.01f64..50.0, n in 2usize..80, offset in 0.0f64..1.0) {
        let mut r = rng(seed);
        let grid = random_field(&mut r, 5, 1.0, scale).activate();
        let origin = Point3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), 3.0);
        let dir = (Point3::new(r.random_range(-0.5..0.5), 0.0, 0.0) - origin).normalize();
        let out = march_ray(&grid, &origin, &dir, n, offset).unwrap();
        prop_assert!((out.transmittance + out.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!((0.0..=1.0).contains(&out.opacity));
        prop_assert!(out.depth_var >= -1e-9);
    }

    #[test]
    fn activation_respects_ranges(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let mut f = random_field(&mut r, 3, 1.0, 5.0);
        for v in f.raw_density.iter_mut().chain(f.raw_color.iter_mut()) {
            *v *= 30.0;
        }
        for c in f.activate().cells {
            prop_assert!(c[0] >= 0.0);
            prop_assert!(c[1..].iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
