//! Analytic stand-in for a pretrained latent diffusion model.
//!
//! Each view prompt owns a Gaussian mixture over clean latents. Under the
//! forward process the mixture stays a mixture with means `sqrt(abar) mu_k`
//! and covariance `(1 - abar) I`, so scores and noise predictions are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::hand::Keypoint;
use crate::image::{GrayImage, RgbImage};
use crate::render::Camera;
use crate::schedule::{forward_noise, NoiseSchedule};

/// View-dependent prompt suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewLabel {
    Front,
    Back,
    Side,
    Top,
    Bottom,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 5] = [
        ViewLabel::Front,
        ViewLabel::Back,
        ViewLabel::Side,
        ViewLabel::Top,
        ViewLabel::Bottom,
    ];

    /// Buckets a camera by the direction from its target to its position:
    /// elevation beyond 60 degrees is top/bottom, otherwise azimuth within
    /// 60 degrees of +z is front, beyond 120 degrees back, else side.
    pub fn of_camera(camera: &Camera) -> Self {
        let d = (camera.position() - camera.look_at()).normalize();
        let elevation = d.y.clamp(-1.0, 1.0).asin().to_degrees();
        if elevation > 60.0 {
            return ViewLabel::Top;
        }
        if elevation < -60.0 {
            return ViewLabel::Bottom;
        }
        let azimuth = d.x.atan2(d.z).to_degrees().abs();
        if azimuth < 60.0 {
            ViewLabel::Front
        } else if azimuth > 120.0 {
            ViewLabel::Back
        } else {
            ViewLabel::Side
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewLabel::Front => "front",
            ViewLabel::Back => "back",
            ViewLabel::Side => "side",
            ViewLabel::Top => "top",
            ViewLabel::Bottom => "bottom",
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewLabel {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        ViewLabel::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown view label '{s}'")))
    }
}

/// Linear image-to-latent map: luminance averaged over `factor x factor`
/// blocks; decoding repeats each latent value over its block in all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub image_size: usize,
    pub latent_size: usize,
    pub channels: usize,
}

impl LatentCodec {
    pub const FACTOR: usize = 4;

    pub fn new(image_size: usize) -> Result<Self> {
        if image_size == 0 || image_size % Self::FACTOR != 0 {
            return Err(LabError::Config(format!(
                "image size {image_size} must be a positive multiple of {}",
                Self::FACTOR
            )));
        }
        Ok(Self {
            image_size,
            latent_size: image_size / Self::FACTOR,
            channels: 1,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_size * self.latent_size * self.channels
    }

    pub fn encode(&self, image: &RgbImage) -> Result<Vec<f64>> {
        if image.size != self.image_size {
            return Err(LabError::shape("codec input size", self.image_size, image.size));
        }
        let f = Self::FACTOR;
        let norm = 1.0 / (3 * f * f) as f64;
        let mut z = vec![0.0; self.latent_dim()];
        for row in 0..self.image_size {
            for col in 0..self.image_size {
                let k = 3 * (row * self.image_size + col);
                let lum = image.data[k] + image.data[k + 1] + image.data[k + 2];
                z[(row / f) * self.latent_size + col / f] += lum * norm;
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<RgbImage> {
        if z.len() != self.latent_dim() {
            return Err(LabError::shape("codec latent", self.latent_dim(), z.len()));
        }
        let f = Self::FACTOR;
        let mut img = RgbImage::new(self.image_size);
        for row in 0..self.image_size {
            for col in 0..self.image_size {
                let v = z[(row / f) * self.latent_size + col / f];
                let k = 3 * (row * self.image_size + col);
                img.data[k..k + 3].fill(v);
            }
        }
        Ok(img)
    }

    /// Transpose of `encode`: pulls a latent-space gradient back to pixels.
    pub fn encode_adjoint(&self, grad: &[f64]) -> Result<RgbImage> {
        if grad.len() != self.latent_dim() {
            return Err(LabError::shape("codec adjoint", self.latent_dim(), grad.len()));
        }
        let f = Self::FACTOR;
        let norm = 1.0 / (3 * f * f) as f64;
        let mut img = RgbImage::new(self.image_size);
        for row in 0..self.image_size {
            for col in 0..self.image_size {
                let v = grad[(row / f) * self.latent_size + col / f] * norm;
                let k = 3 * (row * self.image_size + col);
                img.data[k..k + 3].fill(v);
            }
        }
        Ok(img)
    }
}

/// Identifies a projected skeleton: the view bucket plus a digest of the
/// ordered 2D keypoints and their visibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConditionKey {
    pub view: ViewLabel,
    pub skeleton_hash: u64,
}

impl ConditionKey {
    /// Coordinates are quantized to 1e-3 pixel before hashing.
    pub fn from_keypoints(view: ViewLabel, keypoints: &[Keypoint]) -> Self {
        let mut hasher = Sha256::new();
        for kp in keypoints {
            hasher.update(((kp.x * 1e3).round() as i64).to_le_bytes());
            hasher.update(((kp.y * 1e3).round() as i64).to_le_bytes());
            hasher.update([kp.visible as u8]);
        }
        let digest = hasher.finalize();
        let skeleton_hash = u64::from_le_bytes(digest[..8].try_into().unwrap());
        Self {
            view,
            skeleton_hash,
        }
    }
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:016x}", self.view, self.skeleton_hash)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeLabel {
    /// Which candidate geometry the mode encodes, e.g. "five".
    pub variant: String,
    pub key: ConditionKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMode {
    pub mu: Vec<f64>,
    pub weight: f64,
    pub label: ModeLabel,
}

/// Per-view-bucket mixtures over clean latents.
#[derive(Debug, Clone)]
pub struct ViewLandscape {
    buckets: BTreeMap<ViewLabel, Vec<GaussianMode>>,
    codec: LatentCodec,
    schedule: Arc<NoiseSchedule>,
}

impl ViewLandscape {
    pub fn new(
        buckets: BTreeMap<ViewLabel, Vec<GaussianMode>>,
        codec: LatentCodec,
        schedule: Arc<NoiseSchedule>,
    ) -> Result<Self> {
        for (view, modes) in &buckets {
            if modes.is_empty() {
                return Err(LabError::Config(format!("bucket '{view}' has no modes")));
            }
            let total: f64 = modes.iter().map(|m| m.weight).sum();
            if (total - 1.0).abs() > 1e-12 || modes.iter().any(|m| m.weight < 0.0) {
                return Err(LabError::Config(format!(
                    "bucket '{view}' weights sum to {total}, expected 1"
                )));
            }
            if let Some(m) = modes.iter().find(|m| m.mu.len() != codec.latent_dim()) {
                return Err(LabError::shape("mode latent", codec.latent_dim(), m.mu.len()));
            }
        }
        Ok(Self {
            buckets,
            codec,
            schedule,
        })
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn buckets(&self) -> &BTreeMap<ViewLabel, Vec<GaussianMode>> {
        &self.buckets
    }

    pub fn bucket(&self, view: ViewLabel) -> Result<&[GaussianMode]> {
        self.buckets
            .get(&view)
            .map(Vec::as_slice)
            .ok_or_else(|| LabError::Config(format!("landscape has no bucket for view '{view}'")))
    }

    /// Writes each mode's decoded image as `<view>_<index>_<variant>.pgm`.
    pub fn dump_pgm(&self, dir: &Path) -> Result<()> {
        for (view, modes) in &self.buckets {
            for (k, mode) in modes.iter().enumerate() {
                let rgb = self.codec.decode(&mode.mu)?;
                let gray = GrayImage {
                    size: rgb.size,
                    data: rgb.data.chunks_exact(3).map(|p| p[0]).collect(),
                };
                gray.write_pgm(&dir.join(format!("{view}_{k:02}_{}.pgm", mode.label.variant)))?;
            }
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Score of an isotropic Gaussian: -(z - mu) / sigma2.
pub fn gaussian_score(z: &[f64], mu: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0) {
        return Err(LabError::Domain(format!("variance {sigma2} must be positive")));
    }
    if z.len() != mu.len() {
        return Err(LabError::shape("gaussian_score mean", z.len(), mu.len()));
    }
    Ok(z.iter().zip(mu).map(|(a, m)| -(a - m) / sigma2).collect())
}

fn check_bucket(z_t: &[f64], bucket: &[GaussianMode]) -> Result<()> {
    if bucket.is_empty() {
        return Err(LabError::Config("mode bucket is empty".into()));
    }
    if let Some(m) = bucket.iter().find(|m| m.mu.len() != z_t.len()) {
        return Err(LabError::shape("mixture latent", z_t.len(), m.mu.len()));
    }
    Ok(())
}

/// Unnormalized log responsibilities `log w_k - |z_t - sqrt(abar) mu_k|^2 / (2 s2)`.
fn log_terms(z_t: &[f64], bucket: &[GaussianMode], root_abar: f64, s2: f64) -> Vec<f64> {
    bucket
        .iter()
        .map(|m| {
            let d2: f64 = z_t
                .iter()
                .zip(&m.mu)
                .map(|(z, mu)| (z - root_abar * mu).powi(2))
                .sum();
            m.weight.ln() - d2 / (2.0 * s2)
        })
        .collect()
}

/// Posterior mode probabilities given the noised latent.
pub fn responsibilities(
    z_t: &[f64],
    bucket: &[GaussianMode],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_bucket(z_t, bucket)?;
    let abar = schedule.alpha_bar(t)?;
    let logs = log_terms(z_t, bucket, abar.sqrt(), 1.0 - abar);
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// log sum_k w_k N(z_t; sqrt(abar) mu_k, (1 - abar) I).
pub fn noised_mixture_log_density(
    z_t: &[f64],
    bucket: &[GaussianMode],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_bucket(z_t, bucket)?;
    let abar = schedule.alpha_bar(t)?;
    let s2 = 1.0 - abar;
    let logs = log_terms(z_t, bucket, abar.sqrt(), s2);
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    let d = z_t.len() as f64;
    Ok(lse - 0.5 * d * (std::f64::consts::TAU * s2).ln())
}

/// Exact gradient of [`noised_mixture_log_density`] in `z_t`.
pub fn noised_mixture_score(
    z_t: &[f64],
    bucket: &[GaussianMode],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let resp = responsibilities(z_t, bucket, t, schedule)?;
    let abar = schedule.alpha_bar(t)?;
    let (root_abar, s2) = (abar.sqrt(), 1.0 - abar);
    let mut score = vec![0.0; z_t.len()];
    for (r, m) in resp.iter().zip(bucket) {
        for ((s, z), mu) in score.iter_mut().zip(z_t).zip(&m.mu) {
            *s -= r * (z - root_abar * mu) / s2;
        }
    }
    Ok(score)
}

/// Restricts a bucket to modes whose key equals `key`; weights renormalized.
pub fn condition_bucket(bucket: &[GaussianMode], key: &ConditionKey) -> Result<Vec<GaussianMode>> {
    let mut kept: Vec<GaussianMode> = bucket.iter().filter(|m| m.label.key == *key).cloned().collect();
    let total: f64 = kept.iter().map(|m| m.weight).sum();
    if kept.is_empty() || total <= 0.0 {
        let labels: Vec<String> = bucket
            .iter()
            .map(|m| format!("{}@{}", m.label.variant, m.label.key))
            .collect();
        return Err(LabError::Config(format!(
            "condition {key} matches no mode in bucket [{}]",
            labels.join(", ")
        )));
    }
    if kept.len() == bucket.len() {
        return Ok(kept);
    }
    for m in &mut kept {
        m.weight /= total;
    }
    Ok(kept)
}

pub fn condition(
    landscape: &ViewLandscape,
    view: ViewLabel,
    key: &ConditionKey,
) -> Result<Vec<GaussianMode>> {
    condition_bucket(landscape.bucket(view)?, key)
}

/// eps_hat = -sqrt(1 - abar) * score of the (optionally conditioned) mixture.
pub fn predict_noise(
    z_t: &[f64],
    bucket: &[GaussianMode],
    t: usize,
    schedule: &NoiseSchedule,
    condition: Option<&ConditionKey>,
) -> Result<Vec<f64>> {
    let conditioned;
    let effective = match condition {
        Some(key) => {
            conditioned = condition_bucket(bucket, key)?;
            conditioned.as_slice()
        }
        None => bucket,
    };
    let score = noised_mixture_score(z_t, effective, t, schedule)?;
    let scale = (1.0 - schedule.alpha_bar(t)?).sqrt();
    Ok(score.into_iter().map(|s| -scale * s).collect())
}

/// Nearest clean mode by latent Euclidean distance.
pub fn nearest_mode<'a>(bucket: &'a [GaussianMode], z: &[f64]) -> Result<(&'a GaussianMode, f64)> {
    check_bucket(z, bucket)?;
    let (mode, d2) = bucket
        .iter()
        .map(|m| (m, squared_distance(z, &m.mu)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    Ok((mode, d2.sqrt()))
}

/// Source of standard-normal noise vectors.
pub enum Noise<'a> {
    Zero,
    Gaussian(&'a mut dyn RngCore),
}

impl Noise<'_> {
    pub fn draw(&mut self, dim: usize) -> Vec<f64> {
        match self {
            Noise::Zero => vec![0.0; dim],
            Noise::Gaussian(rng) => (0..dim).map(|_| StandardNormal.sample(&mut **rng)).collect(),
        }
    }
}

/// Closed-form and Monte-Carlo magnitudes of the view-averaged expected score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScore {
    pub formula_value: f64,
    pub mc_value: f64,
}

/// Expected score of an initialization with respect to the local Gaussian
/// around each view's ideal latent, `N(sqrt(abar) E(x_latent), (1 - abar) I)`.
///
/// `formula_value` evaluates the closed form with the per-view mean noise;
/// `mc_value` averages the exact score at forward-noised initial latents
/// over the same draws.
pub fn expected_init_score(
    init_views: &[RgbImage],
    latent_views: &[RgbImage],
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    t: usize,
    n_eps: usize,
    mut noise: Noise<'_>,
) -> Result<InitScore> {
    if init_views.len() != latent_views.len() {
        return Err(LabError::shape("paired views", init_views.len(), latent_views.len()));
    }
    if init_views.is_empty() || n_eps == 0 {
        return Err(LabError::Domain("need at least one view and one noise draw".into()));
    }
    let abar = schedule.alpha_bar(t)?;
    let (root_abar, s2) = (abar.sqrt(), 1.0 - abar);
    let dim = codec.latent_dim();
    let mut formula = vec![0.0; dim];
    let mut mc = vec![0.0; dim];
    let n_views = init_views.len() as f64;
    for (init, latent) in init_views.iter().zip(latent_views) {
        let z_init = codec.encode(init)?;
        let z_latent = codec.encode(latent)?;
        let mode: Vec<f64> = z_latent.iter().map(|z| root_abar * z).collect();
        let mut eps_mean = vec![0.0; dim];
        for _ in 0..n_eps {
            let eps = noise.draw(dim);
            let z_t = forward_noise(&z_init, t, &eps, schedule)?;
            let score = gaussian_score(&z_t, &mode, s2)?;
            for k in 0..dim {
                mc[k] += score[k] / (n_views * n_eps as f64);
                eps_mean[k] += eps[k] / n_eps as f64;
            }
        }
        for k in 0..dim {
            let gap = z_init[k] - z_latent[k];
            formula[k] -= (root_abar * gap + s2.sqrt() * eps_mean[k]) / s2 / n_views;
        }
    }
    Ok(InitScore {
        formula_value: norm(&formula),
        mc_value: norm(&mc),
    })
}
