//! Flat `key = value` experiment configuration.
//!
//! `#` starts a comment, arrays are comma-separated, unknown or duplicate
//! keys are errors and missing keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{AdamConfig, LossToggles, LossWeights, StageOptions, Stage2Options};
use crate::error::{LabError, Result};
use crate::hand::{HandVariant, PoseParams, NUM_DIGITS};
use crate::render::RenderSettings;
use crate::schedule::{AnnealingPlan, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub field_resolution: usize,
    pub field_extent: f64,
    pub density_scale: f64,
    pub n_samples: usize,
    pub fov_deg: f64,
    pub ring_count: usize,
    pub ring_radius: f64,
    pub ring_elevations: Vec<f64>,
    pub init_ring_count: usize,
    pub init_ring_elevations: Vec<f64>,
    pub pose_curl: Vec<f64>,
    pub pose_spread: Vec<f64>,
    pub pose_rotation: Vec<f64>,
    pub pose_translation: Vec<f64>,
    pub variants: Vec<String>,
    pub variant_weights: Vec<f64>,
    pub condition_variant: String,
    pub t_max: usize,
    pub t_min: usize,
    pub lambda_chs_max: f64,
    pub lambda_chs_min: f64,
    pub lambda_sds: f64,
    pub lambda_img: f64,
    pub lambda_zvar: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub skeleton_condition: bool,
    pub shape_init: bool,
    pub chs_loss: bool,
    pub init_iters: usize,
    pub stage2_iters: usize,
    pub init_density: f64,
    /// Ball density stage 1 starts from.
    pub shape_init_density: f64,
    pub init_radius: f64,
    pub init_noise: f64,
    pub wall_clock: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            image_size: 64,
            field_resolution: 48,
            field_extent: 1.2,
            density_scale: 40.0,
            n_samples: 64,
            fov_deg: 40.0,
            ring_count: 8,
            ring_radius: 4.0,
            ring_elevations: vec![15.0],
            init_ring_count: 12,
            init_ring_elevations: vec![15.0, 45.0],
            pose_curl: vec![0.0; NUM_DIGITS],
            pose_spread: vec![0.0; NUM_DIGITS],
            pose_rotation: vec![0.0; 3],
            pose_translation: vec![0.0; 3],
            variants: vec!["five".into(), "four".into()],
            variant_weights: vec![0.5, 0.5],
            condition_variant: "five".into(),
            t_max: AnnealingPlan::DEFAULT_T_MAX,
            t_min: AnnealingPlan::DEFAULT_T_MIN,
            lambda_chs_max: AnnealingPlan::DEFAULT_LAMBDA_MAX,
            lambda_chs_min: AnnealingPlan::DEFAULT_LAMBDA_MIN,
            lambda_sds: 1.0,
            lambda_img: 0.01,
            lambda_zvar: 100.0,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            skeleton_condition: true,
            shape_init: true,
            chs_loss: true,
            init_iters: 500,
            stage2_iters: 2000,
            init_density: 0.01,
            shape_init_density: 1.5,
            init_radius: 0.8,
            init_noise: 0.1,
            wall_clock: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LabError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_scalar(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn fail(key: &str, reason: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("{key}: {reason}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(fail(key, "duplicate key"));
            }
            match key {
                "seed" => c.seed = parse_scalar(key, v)?,
                "image_size" => c.image_size = parse_scalar(key, v)?,
                "field_resolution" => c.field_resolution = parse_scalar(key, v)?,
                "field_extent" => c.field_extent = parse_scalar(key, v)?,
                "density_scale" => c.density_scale = parse_scalar(key, v)?,
                "n_samples" => c.n_samples = parse_scalar(key, v)?,
                "fov_deg" => c.fov_deg = parse_scalar(key, v)?,
                "ring_count" => c.ring_count = parse_scalar(key, v)?,
                "ring_radius" => c.ring_radius = parse_scalar(key, v)?,
                "ring_elevations" => c.ring_elevations = parse_list(key, v)?,
                "init_ring_count" => c.init_ring_count = parse_scalar(key, v)?,
                "init_ring_elevations" => c.init_ring_elevations = parse_list(key, v)?,
                "pose_curl" => c.pose_curl = parse_list(key, v)?,
                "pose_spread" => c.pose_spread = parse_list(key, v)?,
                "pose_rotation" => c.pose_rotation = parse_list(key, v)?,
                "pose_translation" => c.pose_translation = parse_list(key, v)?,
                "variants" => c.variants = parse_list(key, v)?,
                "variant_weights" => c.variant_weights = parse_list(key, v)?,
                "condition_variant" => c.condition_variant = v.to_string(),
                "t_max" => c.t_max = parse_scalar(key, v)?,
                "t_min" => c.t_min = parse_scalar(key, v)?,
                "lambda_chs_max" => c.lambda_chs_max = parse_scalar(key, v)?,
                "lambda_chs_min" => c.lambda_chs_min = parse_scalar(key, v)?,
                "lambda_sds" => c.lambda_sds = parse_scalar(key, v)?,
                "lambda_img" => c.lambda_img = parse_scalar(key, v)?,
                "lambda_zvar" => c.lambda_zvar = parse_scalar(key, v)?,
                "lr" => c.lr = parse_scalar(key, v)?,
                "beta1" => c.beta1 = parse_scalar(key, v)?,
                "beta2" => c.beta2 = parse_scalar(key, v)?,
                "adam_eps" => c.adam_eps = parse_scalar(key, v)?,
                "skeleton_condition" => c.skeleton_condition = parse_scalar(key, v)?,
                "shape_init" => c.shape_init = parse_scalar(key, v)?,
                "chs_loss" => c.chs_loss = parse_scalar(key, v)?,
                "init_iters" => c.init_iters = parse_scalar(key, v)?,
                "stage2_iters" => c.stage2_iters = parse_scalar(key, v)?,
                "init_density" => c.init_density = parse_scalar(key, v)?,
                "shape_init_density" => c.shape_init_density = parse_scalar(key, v)?,
                "init_radius" => c.init_radius = parse_scalar(key, v)?,
                "init_noise" => c.init_noise = parse_scalar(key, v)?,
                "wall_clock" => c.wall_clock = parse_scalar(key, v)?,
                "output_dir" => c.output_dir = PathBuf::from(v),
                other => return Err(fail(other, "unknown key")),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("field_resolution", self.field_resolution.to_string());
        kv("field_extent", self.field_extent.to_string());
        kv("density_scale", self.density_scale.to_string());
        kv("n_samples", self.n_samples.to_string());
        kv("fov_deg", self.fov_deg.to_string());
        kv("ring_count", self.ring_count.to_string());
        kv("ring_radius", self.ring_radius.to_string());
        kv("ring_elevations", join(&self.ring_elevations));
        kv("init_ring_count", self.init_ring_count.to_string());
        kv("init_ring_elevations", join(&self.init_ring_elevations));
        kv("pose_curl", join(&self.pose_curl));
        kv("pose_spread", join(&self.pose_spread));
        kv("pose_rotation", join(&self.pose_rotation));
        kv("pose_translation", join(&self.pose_translation));
        kv("variants", join(&self.variants));
        kv("variant_weights", join(&self.variant_weights));
        kv("condition_variant", self.condition_variant.clone());
        kv("t_max", self.t_max.to_string());
        kv("t_min", self.t_min.to_string());
        kv("lambda_chs_max", self.lambda_chs_max.to_string());
        kv("lambda_chs_min", self.lambda_chs_min.to_string());
        kv("lambda_sds", self.lambda_sds.to_string());
        kv("lambda_img", self.lambda_img.to_string());
        kv("lambda_zvar", self.lambda_zvar.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("skeleton_condition", self.skeleton_condition.to_string());
        kv("shape_init", self.shape_init.to_string());
        kv("chs_loss", self.chs_loss.to_string());
        kv("init_iters", self.init_iters.to_string());
        kv("stage2_iters", self.stage2_iters.to_string());
        kv("init_density", self.init_density.to_string());
        kv("shape_init_density", self.shape_init_density.to_string());
        kv("init_radius", self.init_radius.to_string());
        kv("init_noise", self.init_noise.to_string());
        kv("wall_clock", self.wall_clock.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        s
    }

    /// Checks every field; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(fail(key, format!("{v} must be positive and finite")))
            }
        };
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(fail("image_size", "must be a multiple of 4 and at least 8"));
        }
        if self.field_resolution < 8 {
            return Err(fail("field_resolution", "must be at least 8"));
        }
        positive("field_extent", self.field_extent)?;
        positive("density_scale", self.density_scale)?;
        if self.n_samples < 2 {
            return Err(fail("n_samples", "must be at least 2"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(fail("fov_deg", "must lie in (0, 180)"));
        }
        if self.ring_radius <= self.field_extent * 3f64.sqrt() {
            return Err(fail("ring_radius", "cameras must sit outside the field's bounding cube"));
        }
        for (key, count, elevations) in [
            ("ring", self.ring_count, &self.ring_elevations),
            ("init_ring", self.init_ring_count, &self.init_ring_elevations),
        ] {
            if count == 0 {
                return Err(fail(&format!("{key}_count"), "must be at least 1"));
            }
            if elevations.is_empty() || elevations.iter().any(|e| !(e.abs() < 90.0)) {
                return Err(fail(&format!("{key}_elevations"), "need at least one angle in (-90, 90)"));
            }
        }
        for (key, v, n) in [
            ("pose_curl", &self.pose_curl, NUM_DIGITS),
            ("pose_spread", &self.pose_spread, NUM_DIGITS),
            ("pose_rotation", &self.pose_rotation, 3),
            ("pose_translation", &self.pose_translation, 3),
        ] {
            if v.len() != n {
                return Err(fail(key, format!("expected {n} values, got {}", v.len())));
            }
        }
        self.pose()
            .validate()
            .map_err(|e| LabError::Config(format!("pose: {e}")))?;
        if self.variants.is_empty() {
            return Err(fail("variants", "need at least one variant"));
        }
        let mut unique = HashSet::new();
        for v in &self.variants {
            HandVariant::parse(v).map_err(|_| fail("variants", format!("unknown variant '{v}'")))?;
            if !unique.insert(v) {
                return Err(fail("variants", format!("duplicate variant '{v}'")));
            }
        }
        if self.variant_weights.len() != self.variants.len() {
            return Err(fail("variant_weights", "needs one weight per variant"));
        }
        let total: f64 = self.variant_weights.iter().sum();
        if self.variant_weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(fail("variant_weights", format!("must be non-negative and sum to 1, got {total}")));
        }
        if !self.variants.contains(&self.condition_variant) {
            return Err(fail("condition_variant", "must be one of the variants"));
        }
        if self.t_max > NoiseSchedule::DEFAULT_STEPS {
            return Err(fail("t_max", format!("exceeds {} schedule steps", NoiseSchedule::DEFAULT_STEPS)));
        }
        AnnealingPlan::new(self.t_max, self.t_min, 1, self.lambda_chs_max, self.lambda_chs_min)
            .map_err(|e| LabError::Config(format!("annealing: {e}")))?;
        self.weights().validate()?;
        positive("lr", self.lr)?;
        positive("adam_eps", self.adam_eps)?;
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(fail(key, "must lie in [0, 1)"));
            }
        }
        if self.shape_init && self.init_iters == 0 {
            return Err(fail("init_iters", "must be at least 1 when shape_init is on"));
        }
        positive("init_density", self.init_density)?;
        positive("shape_init_density", self.shape_init_density)?;
        if !(self.init_radius > 0.0 && self.init_radius <= 1.0) {
            return Err(fail("init_radius", "must lie in (0, 1]"));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(fail("init_noise", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn pose(&self) -> PoseParams {
        let mut pose = PoseParams::default();
        let copy = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s;
            }
        };
        copy(&mut pose.curl, &self.pose_curl);
        copy(&mut pose.spread, &self.pose_spread);
        copy(&mut pose.rotation, &self.pose_rotation);
        copy(&mut pose.translation, &self.pose_translation);
        pose
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            sds: self.lambda_sds,
            img: self.lambda_img,
            zvar: self.lambda_zvar,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            n_samples: self.n_samples,
        }
    }

    pub fn stage_options(&self) -> StageOptions {
        StageOptions {
            settings: self.render_settings(),
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            wall_clock: self.wall_clock,
        }
    }

    pub fn stage2_options(&self) -> Stage2Options {
        Stage2Options {
            weights: self.weights(),
            toggles: LossToggles {
                chs: self.chs_loss,
                ..LossToggles::default()
            },
            conditioned: self.skeleton_condition,
            stage: self.stage_options(),
        }
    }

    pub fn plan(&self) -> Result<Option<AnnealingPlan>> {
        if self.stage2_iters == 0 {
            return Ok(None);
        }
        AnnealingPlan::new(
            self.t_max,
            self.t_min,
            self.stage2_iters,
            self.lambda_chs_max,
            self.lambda_chs_min,
        )
        .map(Some)
    }

    /// Output root, overridden by `SDSLAB_OUT` when set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("SDSLAB_OUT") {
            Some(root) if !root.is_empty() => {
                let leaf = self.output_dir.file_name().map(PathBuf::from).unwrap_or_default();
                PathBuf::from(root).join(leaf)
            }
            _ => self.output_dir.clone(),
        }
    }

    /// Canonical text of everything stage 1 depends on.
    pub fn init_signature(&self) -> String {
        let mut c = Self::default();
        c.image_size = self.image_size;
        c.field_resolution = self.field_resolution;
        c.field_extent = self.field_extent;
        c.density_scale = self.density_scale;
        c.n_samples = self.n_samples;
        c.fov_deg = self.fov_deg;
        c.ring_radius = self.ring_radius;
        c.init_ring_count = self.init_ring_count;
        c.init_ring_elevations = self.init_ring_elevations.clone();
        c.pose_curl = self.pose_curl.clone();
        c.pose_spread = self.pose_spread.clone();
        c.pose_rotation = self.pose_rotation.clone();
        c.pose_translation = self.pose_translation.clone();
        c.condition_variant = self.condition_variant.clone();
        c.lr = self.lr;
        c.beta1 = self.beta1;
        c.beta2 = self.beta2;
        c.adam_eps = self.adam_eps;
        c.init_iters = self.init_iters;
        c.shape_init_density = self.shape_init_density;
        c.init_radius = self.init_radius;
        c.emit()
    }
}
