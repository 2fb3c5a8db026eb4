//! Forward-diffusion noise schedule, square-root timestep annealing and the
//! annealed corrective-shape weight.
//!
//! Timesteps are 1-based: `alpha_bar(1)` is the product of the first factor
//! only and `alpha_bar(T)` the full product.

use crate::error::{LabError, Result};

/// Linear-beta DDPM schedule with its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.02;

    /// Betas spaced linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(LabError::Domain(format!(
                "noise schedule needs at least 2 steps, got {num_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(LabError::Domain(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let span = (num_steps - 1) as f64;
        let betas: Vec<f64> = (0..num_steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / span)
            .collect();
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for beta in &betas {
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal retention at 1-based timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.num_steps() {
            return Err(LabError::Range {
                what: "timestep",
                value: t as f64,
                lo: 1.0,
                hi: self.num_steps() as f64,
            });
        }
        Ok(self.alpha_bars[t - 1])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(
            Self::DEFAULT_STEPS,
            Self::DEFAULT_BETA_START,
            Self::DEFAULT_BETA_END,
        )
        .expect("default schedule constants are valid")
    }
}

/// z_t = sqrt(abar) z0 + sqrt(1 - abar) eps.
pub fn forward_noise(z0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(LabError::shape("forward_noise eps", z0.len(), eps.len()));
    }
    let abar = schedule.alpha_bar(t)?;
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Timestep bounds, iteration budget and CHS weight range of stage 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealingPlan {
    pub t_max: usize,
    pub t_min: usize,
    pub i_max: usize,
    pub lambda_max_chs: f64,
    pub lambda_min_chs: f64,
}

impl AnnealingPlan {
    pub const DEFAULT_T_MAX: usize = 600;
    pub const DEFAULT_T_MIN: usize = 300;
    pub const DEFAULT_LAMBDA_MAX: f64 = 15000.0;
    pub const DEFAULT_LAMBDA_MIN: f64 = 1000.0;

    pub fn new(
        t_max: usize,
        t_min: usize,
        i_max: usize,
        lambda_max_chs: f64,
        lambda_min_chs: f64,
    ) -> Result<Self> {
        if !(t_max > t_min && t_min >= 1) {
            return Err(LabError::Domain(format!(
                "annealing bounds need t_max > t_min >= 1, got t_max={t_max}, t_min={t_min}"
            )));
        }
        if i_max == 0 {
            return Err(LabError::Domain("annealing needs i_max >= 1".into()));
        }
        if !(lambda_min_chs >= 0.0 && lambda_max_chs >= lambda_min_chs) {
            return Err(LabError::Domain(format!(
                "CHS weights need 0 <= lambda_min <= lambda_max, got ({lambda_min_chs}, {lambda_max_chs})"
            )));
        }
        Ok(Self {
            t_max,
            t_min,
            i_max,
            lambda_max_chs,
            lambda_min_chs,
        })
    }

    /// Default constants (600/300 timesteps, 15000/1000 weights) over `i_max` iterations.
    pub fn with_defaults(i_max: usize) -> Result<Self> {
        Self::new(
            Self::DEFAULT_T_MAX,
            Self::DEFAULT_T_MIN,
            i_max,
            Self::DEFAULT_LAMBDA_MAX,
            Self::DEFAULT_LAMBDA_MIN,
        )
    }

    fn progress(&self, i: usize) -> Result<f64> {
        if i > self.i_max {
            return Err(LabError::Range {
                what: "iteration",
                value: i as f64,
                lo: 0.0,
                hi: self.i_max as f64,
            });
        }
        Ok((i as f64 / self.i_max as f64).sqrt())
    }

    /// Real-valued annealed timestep t_max - (t_max - t_min) sqrt(i / i_max).
    pub fn timestep_at_unrounded(&self, i: usize) -> Result<f64> {
        let span = (self.t_max - self.t_min) as f64;
        Ok(self.t_max as f64 - span * self.progress(i)?)
    }

    /// Annealed timestep rounded to the nearest schedule index.
    pub fn timestep_at(&self, i: usize) -> Result<usize> {
        let t = self.timestep_at_unrounded(i)?.round() as usize;
        Ok(t.clamp(self.t_min, self.t_max))
    }

    /// CHS weight as a linear blend in timestep; clamps outside [t_min, t_max].
    pub fn lambda_chs_at_t(&self, t: f64) -> f64 {
        let (lo, hi) = (self.t_min as f64, self.t_max as f64);
        let t = t.clamp(lo, hi);
        let span = hi - lo;
        self.lambda_max_chs * (t - lo) / span + self.lambda_min_chs * (hi - t) / span
    }

    /// CHS weight as a square-root decay in iteration.
    pub fn lambda_chs_at_iter(&self, i: usize) -> Result<f64> {
        let p = self.progress(i)?;
        Ok(self.lambda_max_chs - (self.lambda_max_chs - self.lambda_min_chs) * p)
    }
}
