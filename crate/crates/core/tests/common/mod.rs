//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use sdslab::render::{Camera, VoxelField};
use sdslab::score::{ConditionKey, GaussianMode, ModeLabel, ViewLabel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// log N(z; mu, s2 I), written out term by term.
pub fn log_gaussian(z: &[f64], mu: &[f64], s2: f64) -> f64 {
    let d = z.len() as f64;
    let q: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * q / s2 - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln()
}

/// log sum_k w_k N(z; c mu_k, s2 I) by plain summation of densities,
/// shifted by the largest exponent so moderate instances stay finite.
pub fn log_mixture(z: &[f64], weights: &[f64], mus: &[Vec<f64>], c: f64, s2: f64) -> f64 {
    let logs: Vec<f64> = weights
        .iter()
        .zip(mus)
        .map(|(w, mu)| {
            let scaled: Vec<f64> = mu.iter().map(|m| c * m).collect();
            w.ln() + log_gaussian(z, &scaled, s2)
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up = f(&p);
            p[k] = orig - h;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

pub fn mode(mu: Vec<f64>, weight: f64, variant: &str, hash: u64) -> GaussianMode {
    GaussianMode {
        mu,
        weight,
        label: ModeLabel {
            variant: variant.to_string(),
            key: ConditionKey {
                view: ViewLabel::Front,
                skeleton_hash: hash,
            },
        },
    }
}

/// Field with random raw parameters in a moderate range.
pub fn random_field(rng: &mut impl Rng, resolution: usize, extent: f64, scale: f64) -> VoxelField {
    let mut f = VoxelField::new(resolution, extent, scale).unwrap();
    for v in f.raw_density.iter_mut() {
        *v = rng.random_range(-3.0..1.0);
    }
    for v in f.raw_color.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    f
}

pub fn front_camera(size: usize) -> Camera {
    Camera::new(Point3::new(0.3, 0.2, 3.5), Point3::origin(), Vector3::y(), 40.0, size).unwrap()
}

/// Spearman rank correlation for distinct values.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
