//! Diffusion noise schedules. Everything here is `f64` regardless of the
//! model scalar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    Linear,
    Cosine,
}

/// Enough to rebuild a schedule exactly; this is what checkpoints store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub family: ScheduleFamily,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            family: ScheduleFamily::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.family {
            ScheduleFamily::Linear => NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end),
            ScheduleFamily::Cosine => NoiseSchedule::cosine(self.timesteps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub coef_xt: f64,
    pub coef_x0: f64,
    pub variance: f64,
}

/// β, α and ᾱ tables indexed by the 1-based timestep.
///
/// Index 0 holds the conventions β_0 = 0, α_0 = 1, ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_start` to `beta_end` inclusive.
    ///
    /// `beta_start = 0` is accepted so the zero-noise identity can be
    /// exercised; every other β must lie in (0, 1).
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::arg("schedule needs at least one timestep"));
        }
        if !(beta_start >= 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::arg(format!(
                "need 0 <= beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let spec = ScheduleSpec {
            family: ScheduleFamily::Linear,
            timesteps,
            beta_start,
            beta_end,
        };
        Self::from_betas_with_spec(betas, spec)
    }

    /// Cosine ᾱ curve with offset 0.008; β capped at 0.999.
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::arg("schedule needs at least one timestep"));
        }
        let s = 0.008;
        let f = |t: usize| ((t as f64 / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas: Vec<f64> = (1..=timesteps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, 0.999)).collect();
        let spec = ScheduleSpec {
            family: ScheduleFamily::Cosine,
            timesteps,
            beta_start: betas[0],
            beta_end: betas[timesteps - 1],
        };
        Self::from_betas_with_spec(betas, spec)
    }

    /// Arbitrary β sequence (β_1..β_T), each in [0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let spec = ScheduleSpec {
            family: ScheduleFamily::Linear,
            timesteps: betas.len(),
            beta_start: betas.first().copied().unwrap_or(0.0),
            beta_end: betas.last().copied().unwrap_or(0.0),
        };
        Self::from_betas_with_spec(betas, spec)
    }

    fn from_betas_with_spec(betas: Vec<f64>, spec: ScheduleSpec) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::arg("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::arg(format!("beta {b} outside [0, 1)")));
        }
        let mut all_betas = Vec::with_capacity(betas.len() + 1);
        all_betas.push(0.0);
        all_betas.extend(betas);
        let alphas: Vec<f64> = all_betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        alpha_bars.push(1.0);
        for t in 1..alphas.len() {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        Ok(Self {
            spec,
            betas: all_betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Maximum timestep T.
    pub fn timesteps(&self) -> usize {
        self.betas.len() - 1
    }

    /// β_1..β_T.
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas[1..]
    }

    /// ᾱ_0..ᾱ_T (length T + 1, ᾱ_0 = 1).
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::arg(format!("timestep {t} outside 0..={}", self.timesteps())));
        }
        Ok(())
    }

    /// Mean coefficients and variance of q(x_{t−1} | x_t, x_0).
    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::arg(format!("posterior timestep {t} outside 1..={}", self.timesteps())));
        }
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            return Err(Error::DegenerateSchedule(format!("alpha_bar at t = {t} is 1")));
        }
        let beta = self.betas[t];
        if ab_prev == 1.0 {
            // 1 − ᾱ_t = β_t here; skip the rounding of the quotient
            return Ok(PosteriorCoefficients {
                coef_xt: 0.0,
                coef_x0: 1.0,
                variance: 0.0,
            });
        }
        Ok(PosteriorCoefficients {
            coef_xt: self.alphas[t].sqrt() * (1.0 - ab_prev) / denom,
            coef_x0: ab_prev.sqrt() * beta / denom,
            variance: (beta * (1.0 - ab_prev) / denom).max(0.0),
        })
    }
}
