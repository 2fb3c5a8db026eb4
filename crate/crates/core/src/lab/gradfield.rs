//! Latent distillation gradients at an initialization, for a fixed view,
//! across timesteps and noise draws.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::distill_view;
use crate::error::{LabError, Result};
use crate::hand::CapsuleHand;
use crate::image::RgbImage;
use crate::lab::config::ExperimentConfig;
use crate::lab::experiment::{random_init, InitCache, Scene};
use crate::render::{render_view, Camera};
use crate::score::{norm, Noise, ViewLandscape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitKind {
    Random,
    Shape,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Shape => "shape",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub t: usize,
    pub draw: usize,
    pub init: InitKind,
    /// eps_hat - eps in latent space.
    pub grad: Vec<f64>,
}

impl GradientSample {
    pub fn magnitude(&self) -> f64 {
        norm(&self.grad)
    }

    /// Unit direction; the zero vector stays zero.
    pub fn direction(&self) -> Vec<f64> {
        let n = self.magnitude();
        if n == 0.0 {
            return vec![0.0; self.grad.len()];
        }
        self.grad.iter().map(|g| g / n).collect()
    }
}

/// Gradients of one rendered view for each `t` and `draws` noise vectors
/// per `t`, drawn in that order from `noise`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_samples(
    image: &RgbImage,
    landscape: &ViewLandscape,
    hand: &CapsuleHand,
    camera: &Camera,
    t_values: &[usize],
    draws: usize,
    conditioned: bool,
    init: InitKind,
    noise: &mut Noise<'_>,
) -> Result<Vec<GradientSample>> {
    let mut out = Vec::with_capacity(t_values.len() * draws);
    for &t in t_values {
        for draw in 0..draws {
            let step = distill_view(image, landscape, hand, camera, t, conditioned, noise)?;
            out.push(GradientSample {
                t,
                draw,
                init,
                grad: step.latent_grad,
            });
        }
    }
    Ok(out)
}

/// Both initializations seen from the first ring camera. The two share the
/// same noise draws so that only the init differs.
pub fn gradient_field(
    config: &ExperimentConfig,
    scene: &Scene,
    cache: &InitCache,
    t_values: &[usize],
    draws: usize,
) -> Result<Vec<GradientSample>> {
    if t_values.is_empty() || draws == 0 {
        return Err(LabError::Config("gradfield needs at least one t and one draw".into()));
    }
    let camera = scene
        .cameras
        .first()
        .ok_or_else(|| LabError::Config("ring_count must be >= 1".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let random = random_init(config, &mut rng)?;
    let (shape, _) = cache.shape_init(config, scene)?;
    let settings = config.render_settings();
    let mut out = Vec::new();
    for (init, field) in [(InitKind::Random, &random), (InitKind::Shape, &shape)] {
        let image = render_view(field, camera, &settings, None)?.color_image;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        out.extend(gradient_samples(
            &image,
            &scene.landscape,
            &scene.hand,
            camera,
            t_values,
            draws,
            config.skeleton_condition,
            init,
            &mut Noise::Gaussian(&mut rng),
        )?);
    }
    Ok(out)
}

/// `t,draw,init,grad_norm,dir_0..dir_{D-1}`.
pub fn gradient_csv(samples: &[GradientSample]) -> String {
    let dim = samples.first().map_or(0, |s| s.grad.len());
    let mut out = String::from("t,draw,init,grad_norm");
    for k in 0..dim {
        let _ = write!(out, ",dir_{k}");
    }
    out.push('\n');
    for s in samples {
        let _ = write!(out, "{},{},{},{}", s.t, s.draw, s.init.name(), s.magnitude());
        for d in s.direction() {
            let _ = write!(out, ",{d}");
        }
        out.push('\n');
    }
    out
}

/// Mean cosine similarity over all unordered pairs. Zero vectors count as
/// orthogonal to everything.
pub fn mean_pairwise_cosine(grads: &[Vec<f64>]) -> f64 {
    let units: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| {
            let n = norm(g);
            g.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            total += units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Samples of one init at one timestep.
pub fn select(samples: &[GradientSample], init: InitKind, t: usize) -> Vec<Vec<f64>> {
    samples
        .iter()
        .filter(|s| s.init == init && s.t == t)
        .map(|s| s.grad.clone())
        .collect()
}
