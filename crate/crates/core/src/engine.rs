//! Two-stage optimizer: silhouette fitting, then distillation from the
//! analytic landscape with corrective-shape, image and depth-variance terms.

use std::fmt::Write as _;
use std::time::Instant;

use rand::RngCore;

use crate::error::{LabError, Result};
use crate::hand::{project_keypoints, silhouette_mask, CapsuleHand};
use crate::image::{GrayImage, RgbImage};
use crate::render::{
    normalized_opacity_backward, render_grid, render_grid_gradients, render_grid_taped, tape_gradients, Camera,
    FieldGradient, RenderAdjoint, RenderOutput, RenderSettings, RenderTape, VoxelField,
};
use crate::schedule::{forward_noise, AnnealingPlan};
use crate::score::{predict_noise, ConditionKey, Noise, ViewLabel, ViewLandscape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sds: f64,
    pub img: f64,
    pub zvar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sds: 1.0,
            img: 0.01,
            zvar: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_sds", self.sds), ("lambda_img", self.img), ("lambda_zvar", self.zvar)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LabError::Config(format!("{name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Which stage-2 terms contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub sds: bool,
    pub chs: bool,
    pub img: bool,
    pub zvar: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            sds: true,
            chs: true,
            img: true,
            zvar: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state over the flat field parameters. Parameters that
/// have never seen a nonzero gradient have zero moments and are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    live: Vec<bool>,
    live_list: Vec<usize>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            live: vec![false; num_params],
            live_list: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Flat indices of the parameters the optimizer has moved so far.
    pub fn live(&self) -> &[usize] {
        &self.live_list
    }

    pub fn step(&mut self, field: &mut VoxelField, grad: &FieldGradient) -> Result<()> {
        let n = field.num_cells();
        if grad.density.len() != n || grad.color.len() != 3 * n || self.m.len() != 4 * n {
            return Err(LabError::shape("optimizer parameters", self.m.len(), 4 * n));
        }
        for (k, g) in grad.iter().enumerate() {
            if *g != 0.0 && !self.live[k] {
                self.live[k] = true;
                self.live_list.push(k);
            }
        }
        let c = self.config;
        self.steps += 1;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        let mut finite = true;
        for &k in &self.live_list {
            let g = grad.get(k);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            finite &= m.is_finite() && v.is_finite();
            *field.param_mut(k) -= c.lr * (*m / bias1) / ((*v / bias2).sqrt() + c.eps);
        }
        if !finite {
            return Err(LabError::Divergence {
                iter: self.steps as usize - 1,
                component: "optimizer",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterRecord {
    pub iter: usize,
    pub t: usize,
    pub lambda_chs: f64,
    pub loss_sds: f64,
    pub loss_chs: f64,
    pub loss_img: f64,
    pub loss_zvar: f64,
    pub loss_total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageReport {
    pub records: Vec<IterRecord>,
}

impl StageReport {
    pub const CSV_HEADER: &'static str =
        "iter,t,lambda_chs,loss_sds,loss_chs,loss_img,loss_zvar,loss_total,seconds";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.iter, r.t, r.lambda_chs, r.loss_sds, r.loss_chs, r.loss_img, r.loss_zvar, r.loss_total, r.seconds
            )
            .unwrap();
        }
        out
    }
}

/// Wall-clock column source; zero unless enabled so reports stay reproducible.
struct Clock(Option<Instant>);

impl Clock {
    fn new(enabled: bool) -> Self {
        Self(enabled.then(Instant::now))
    }

    fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageOptions {
    pub settings: RenderSettings,
    pub adam: AdamConfig,
    pub wall_clock: bool,
}

fn mean_squared(a: &GrayImage, b: &GrayImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

/// Mean over cameras of the per-pixel squared error between normalized
/// opacity and the silhouette mask.
pub fn silhouette_error(
    field: &VoxelField,
    hand: &CapsuleHand,
    cameras: &[Camera],
    settings: &RenderSettings,
) -> Result<f64> {
    if cameras.is_empty() {
        return Err(LabError::Domain("silhouette error needs at least one camera".into()));
    }
    let grid = field.activate();
    let mut total = 0.0;
    for cam in cameras {
        let render = render_grid(&grid, cam, settings, None)?;
        total += mean_squared(&render.normalized_opacity, &silhouette_mask(hand, cam));
    }
    Ok(total / cameras.len() as f64)
}

/// Stage 1: fits normalized opacity to the hand silhouettes, one camera per
/// iteration in round-robin order. The recorded loss is that camera's MSE.
pub fn init_stage(
    field: &mut VoxelField,
    hand: &CapsuleHand,
    cameras: &[Camera],
    iters: usize,
    options: &StageOptions,
) -> Result<StageReport> {
    if iters == 0 || cameras.is_empty() {
        return Err(LabError::Domain("init stage needs iters >= 1 and at least one camera".into()));
    }
    let masks: Vec<GrayImage> = cameras.iter().map(|c| silhouette_mask(hand, c)).collect();
    let mut adam = Adam::new(options.adam, field.num_params());
    let clock = Clock::new(options.wall_clock);
    let mut report = StageReport::default();
    let mut grid = field.activate();
    let mut tape = RenderTape::default();
    for i in 0..iters {
        let cam = &cameras[i % cameras.len()];
        let mask = &masks[i % cameras.len()];
        let render = render_grid_taped(&grid, cam, &options.settings, None, &mut tape)?;
        let loss = mean_squared(&render.normalized_opacity, mask);
        if !loss.is_finite() {
            return Err(LabError::Divergence {
                iter: i,
                component: "init",
            });
        }
        let n = mask.data.len() as f64;
        let adj_norm: Vec<f64> = render
            .normalized_opacity
            .data
            .iter()
            .zip(&mask.data)
            .map(|(o, m)| 2.0 * (o - m) / n)
            .collect();
        let mut adjoint = RenderAdjoint::zeros(cam.image_size());
        adjoint.opacity.data = normalized_opacity_backward(&render.opacity_map, &adj_norm);
        let grad = tape_gradients(&grid, &tape, &adjoint)?.to_field_gradient_with(field, &grid);
        adam.step(field, &grad)?;
        field.refresh(&mut grid, adam.live());
        report.records.push(IterRecord {
            iter: i,
            loss_chs: loss,
            loss_total: loss,
            seconds: clock.seconds(),
            ..Default::default()
        });
    }
    Ok(report)
}

/// Root-mean-square opacity error of one view and its adjoint with respect
/// to the raw opacity map (through min-max normalization).
pub fn chs_view(render: &RenderOutput, mask: &GrayImage) -> Result<(f64, Vec<f64>)> {
    let o = &render.normalized_opacity;
    if o.size != mask.size {
        return Err(LabError::shape("silhouette mask size", o.size, mask.size));
    }
    let n = o.data.len() as f64;
    let rms = mean_squared(o, mask).sqrt();
    if rms == 0.0 {
        return Ok((0.0, vec![0.0; o.data.len()]));
    }
    let adj: Vec<f64> = o.data.iter().zip(&mask.data).map(|(a, m)| (a - m) / (n * rms)).collect();
    Ok((rms, normalized_opacity_backward(&render.opacity_map, &adj)))
}

/// Annealed corrective-shape loss averaged over `cameras`, weighted by the
/// plan's value at timestep `t`.
pub fn chs_loss(
    field: &VoxelField,
    hand: &CapsuleHand,
    cameras: &[Camera],
    t: usize,
    plan: &AnnealingPlan,
    settings: &RenderSettings,
) -> Result<(f64, FieldGradient)> {
    if cameras.is_empty() {
        return Err(LabError::Domain("CHS loss needs at least one camera".into()));
    }
    let lambda = plan.lambda_chs_at_t(t as f64);
    let grid = field.activate();
    let scale = lambda / cameras.len() as f64;
    let mut loss = 0.0;
    let mut grad = FieldGradient::zeros(field.num_cells());
    for cam in cameras {
        let render = render_grid(&grid, cam, settings, None)?;
        let (rms, adj) = chs_view(&render, &silhouette_mask(hand, cam))?;
        loss += scale * rms;
        let mut adjoint = RenderAdjoint::zeros(cam.image_size());
        adjoint.opacity.data = adj;
        let g = render_grid_gradients(&grid, cam, settings, None, &adjoint)?.to_field_gradient_with(field, &grid);
        grad.add_scaled(&g, scale);
    }
    Ok((loss, grad))
}

/// Mean-squared error against a constant target and its image adjoint.
pub fn img_loss(render: &RgbImage, target: &RgbImage) -> Result<(f64, RgbImage)> {
    if render.size != target.size {
        return Err(LabError::shape("image loss target", render.size, target.size));
    }
    let n = render.data.len() as f64;
    let loss = render.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let adj = render.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((loss, RgbImage::from_vec(render.size, adj)?))
}

/// Mean depth variance over pixels with raw opacity above one half.
pub fn zvar_loss(render: &RenderOutput) -> (f64, RenderAdjoint) {
    let size = render.opacity_map.size;
    let mut adjoint = RenderAdjoint::zeros(size);
    let fg: Vec<usize> = (0..size * size).filter(|&k| render.opacity_map.data[k] > 0.5).collect();
    if fg.is_empty() {
        return (0.0, adjoint);
    }
    let inv = 1.0 / fg.len() as f64;
    let mut loss = 0.0;
    for &k in &fg {
        loss += render.depth_variance.data[k] * inv;
        adjoint.depth_var.data[k] = inv;
    }
    (loss, adjoint)
}

/// Everything the distillation term produced for one view.
#[derive(Debug, Clone)]
pub struct SdsStep {
    pub t: usize,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub z_t: Vec<f64>,
    pub eps_hat: Vec<f64>,
    pub key: Option<ConditionKey>,
    /// Latent-space gradient w(t) (eps_hat - eps), with w = 1.
    pub latent_grad: Vec<f64>,
    /// Mean squared noise residual.
    pub residual: f64,
}

impl SdsStep {
    /// Denoised estimate (z_t - sqrt(1 - abar) eps_hat) / sqrt(abar).
    pub fn denoised(&self, landscape: &ViewLandscape) -> Result<Vec<f64>> {
        let abar = landscape.schedule().alpha_bar(self.t)?;
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        Ok(self.z_t.iter().zip(&self.eps_hat).map(|(z, e)| (z - b * e) / a).collect())
    }
}

/// Condition key of the hand as seen from `camera`.
pub fn condition_key(hand: &CapsuleHand, camera: &Camera) -> ConditionKey {
    ConditionKey::from_keypoints(ViewLabel::of_camera(camera), &project_keypoints(hand, camera))
}

/// Noise, predicts and forms the latent distillation gradient for an
/// already-rendered view.
pub fn distill_view(
    image: &RgbImage,
    landscape: &ViewLandscape,
    hand: &CapsuleHand,
    camera: &Camera,
    t: usize,
    conditioned: bool,
    noise: &mut Noise<'_>,
) -> Result<SdsStep> {
    let codec = landscape.codec();
    let z = codec.encode(image)?;
    let eps = noise.draw(z.len());
    let z_t = forward_noise(&z, t, &eps, landscape.schedule())?;
    let view = ViewLabel::of_camera(camera);
    let key = conditioned.then(|| condition_key(hand, camera));
    let eps_hat = predict_noise(&z_t, landscape.bucket(view)?, t, landscape.schedule(), key.as_ref())?;
    let latent_grad: Vec<f64> = eps_hat.iter().zip(&eps).map(|(a, b)| a - b).collect();
    let residual = latent_grad.iter().map(|g| g * g).sum::<f64>() / latent_grad.len() as f64;
    Ok(SdsStep {
        t,
        z,
        eps,
        z_t,
        eps_hat,
        key,
        latent_grad,
        residual,
    })
}

/// One distillation gradient at iteration `i`: renders the field, noises the
/// encoded view at the annealed timestep and back-propagates
/// (eps_hat - eps) through the codec and renderer.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    field: &VoxelField,
    landscape: &ViewLandscape,
    hand: &CapsuleHand,
    camera: &Camera,
    i: usize,
    plan: &AnnealingPlan,
    conditioned: bool,
    settings: &RenderSettings,
    rng: &mut dyn RngCore,
) -> Result<(FieldGradient, SdsStep)> {
    let t = plan.timestep_at(i)?;
    let grid = field.activate();
    let render = render_grid(&grid, camera, settings, None)?;
    let step = distill_view(&render.color_image, landscape, hand, camera, t, conditioned, &mut Noise::Gaussian(rng))?;
    let mut adjoint = RenderAdjoint::zeros(camera.image_size());
    adjoint.color = landscape.codec().encode_adjoint(&step.latent_grad)?;
    let grad = render_grid_gradients(&grid, camera, settings, None, &adjoint)?.to_field_gradient_with(field, &grid);
    Ok((grad, step))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Options {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub conditioned: bool,
    pub stage: StageOptions,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            toggles: LossToggles::default(),
            conditioned: true,
            stage: StageOptions::default(),
        }
    }
}

fn guard(value: f64, iter: usize, component: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LabError::Divergence { iter, component })
    }
}

/// Stage 2 over `plan.i_max` iterations with round-robin cameras. All active
/// terms share one render and one backward pass through a combined adjoint.
#[allow(clippy::too_many_arguments)]
pub fn optimize_stage2(
    field: &mut VoxelField,
    landscape: &ViewLandscape,
    hand: &CapsuleHand,
    cameras: &[Camera],
    plan: &AnnealingPlan,
    options: &Stage2Options,
    rng: &mut dyn RngCore,
) -> Result<StageReport> {
    if cameras.is_empty() {
        return Err(LabError::Domain("stage 2 needs at least one camera".into()));
    }
    options.weights.validate()?;
    let LossWeights { sds: w_sds, img: w_img, zvar: w_zvar } = options.weights;
    let toggles = options.toggles;
    let settings = options.stage.settings;
    let masks: Vec<GrayImage> = if toggles.chs {
        cameras.iter().map(|c| silhouette_mask(hand, c)).collect()
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(options.stage.adam, field.num_params());
    let clock = Clock::new(options.stage.wall_clock);
    let mut report = StageReport::default();
    let mut grid = field.activate();
    let mut tape = RenderTape::default();

    for i in 0..plan.i_max {
        let c = i % cameras.len();
        let cam = &cameras[c];
        let t = plan.timestep_at(i)?;
        let lambda = plan.lambda_chs_at_iter(i)?;
        let render = render_grid_taped(&grid, cam, &settings, None, &mut tape)?;
        let mut adjoint = RenderAdjoint::zeros(cam.image_size());
        let mut rec = IterRecord {
            iter: i,
            t,
            lambda_chs: lambda,
            ..Default::default()
        };

        if toggles.sds || toggles.img {
            let step = distill_view(
                &render.color_image,
                landscape,
                hand,
                cam,
                t,
                options.conditioned,
                &mut Noise::Gaussian(&mut *rng),
            )?;
            if toggles.sds {
                rec.loss_sds = guard(step.residual, i, "sds")?;
                let adj = landscape.codec().encode_adjoint(&step.latent_grad)?;
                for (a, g) in adjoint.color.data.iter_mut().zip(&adj.data) {
                    *a += w_sds * g;
                }
            }
            if toggles.img {
                let target = landscape.codec().decode(&step.denoised(landscape)?)?;
                let (loss, adj) = img_loss(&render.color_image, &target)?;
                rec.loss_img = guard(loss, i, "img")?;
                for (a, g) in adjoint.color.data.iter_mut().zip(&adj.data) {
                    *a += w_img * g;
                }
            }
        }
        if toggles.chs {
            let (rms, adj) = chs_view(&render, &masks[c])?;
            rec.loss_chs = guard(rms, i, "chs")?;
            for (a, g) in adjoint.opacity.data.iter_mut().zip(&adj) {
                *a += lambda * g;
            }
        }
        if toggles.zvar {
            let (loss, adj) = zvar_loss(&render);
            rec.loss_zvar = guard(loss, i, "zvar")?;
            adjoint.add_scaled(&adj, w_zvar);
        }
        rec.loss_total = guard(
            w_sds * rec.loss_sds + lambda * rec.loss_chs + w_img * rec.loss_img + w_zvar * rec.loss_zvar,
            i,
            "total",
        )?;

        let grad = tape_gradients(&grid, &tape, &adjoint)?.to_field_gradient_with(field, &grid);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LabError::Divergence {
                iter: i,
                component: "gradient",
            });
        }
        adam.step(field, &grad)?;
        field.refresh(&mut grid, adam.live());
        rec.seconds = clock.seconds();
        report.records.push(rec);
    }
    Ok(report)
}
