//! Accuracy-driven corruption of discriminator inputs, randomized pair
//! ordering and the loss functions.

use ndarray::{concatenate, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::forward_diffuse;
use crate::error::{Error, Result};
use crate::graph::bce_value;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, LatentTensor};

pub const BCE_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA_ADV: f64 = 1e-3;
pub const DEFAULT_LAMBDA_EMA: f64 = 0.05;

/// EMA of discriminator accuracy and the corruption timestep derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveCorruptionState {
    pub acc_ema: f64,
    pub lambda_ema: f64,
    pub timesteps: usize,
}

impl AdaptiveCorruptionState {
    pub fn new(timesteps: usize, lambda_ema: f64, acc_init: f64) -> Result<Self> {
        if !(lambda_ema > 0.0 && lambda_ema <= 1.0) {
            return Err(Error::arg(format!("lambda_ema must be in (0, 1], got {lambda_ema}")));
        }
        if !(0.0..=1.0).contains(&acc_init) {
            return Err(Error::arg(format!("initial accuracy must be in [0, 1], got {acc_init}")));
        }
        Ok(Self {
            acc_ema: acc_init,
            lambda_ema,
            timesteps,
        })
    }

    /// acc_ema ← acc_batch·λ + acc_ema·(1 − λ).
    pub fn update_ema(&self, acc_batch: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&acc_batch) {
            return Err(Error::arg(format!("batch accuracy must be in [0, 1], got {acc_batch}")));
        }
        let acc_ema = (acc_batch * self.lambda_ema + self.acc_ema * (1.0 - self.lambda_ema)).clamp(0.0, 1.0);
        Ok(Self { acc_ema, ..*self })
    }

    /// s = ⌊max(2T(acc_ema − ½), 0)⌋, at most T.
    pub fn corruption_timestep(&self) -> usize {
        let t = self.timesteps as f64;
        // the EMA only reaches 1 to within an ulp, so allow a little slack
        // before flooring
        let s = (2.0 * t * self.acc_ema - t + 1e-9).max(0.0).floor();
        (s as usize).min(self.timesteps)
    }
}

/// Independent standard-normal draws for the real and generated latents.
pub fn draw_pair_noise<S: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> (LatentTensor<S>, LatentTensor<S>) {
    let real = LatentTensor::randn(shape, rng);
    let fake = LatentTensor::randn(shape, rng);
    (real, fake)
}

/// Forward-diffuses both latents to the same timestep `s` with independent
/// noise.
pub fn corrupt_pair<S: Scalar, R: Rng + ?Sized>(
    z0: &LatentTensor<S>,
    z0_hat: &LatentTensor<S>,
    s: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LatentTensor<S>, LatentTensor<S>)> {
    z0.check_same_shape(z0_hat)?;
    let (n_real, n_fake) = draw_pair_noise(z0.shape(), rng);
    Ok((forward_diffuse(z0, s, schedule, &n_real)?, forward_diffuse(z0_hat, s, schedule, &n_fake)?))
}

/// One fair coin per batch element; `true` means real-first (label 1).
pub fn draw_order<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<bool> {
    (0..batch).map(|_| rng.random_bool(0.5)).collect()
}

/// Channel-concatenates each pair in the given order.
pub fn concat_in_order<S: Scalar>(x_real: &ImageTensor<S>, x_fake: &ImageTensor<S>, real_first: &[bool]) -> Result<ImageTensor<S>> {
    x_real.check_same_shape(x_fake)?;
    if real_first.len() != x_real.batch() {
        return Err(Error::arg(format!("{} order flags for a batch of {}", real_first.len(), x_real.batch())));
    }
    let rows: Vec<_> = real_first
        .iter()
        .enumerate()
        .map(|(i, &rf)| {
            let (a, b) = (x_real.0.index_axis(Axis(0), i), x_fake.0.index_axis(Axis(0), i));
            let (first, second) = if rf { (a, b) } else { (b, a) };
            concatenate(Axis(0), &[first, second]).expect("matching shapes")
        })
        .collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::arg(e.to_string()))?;
    Ok(ImageTensor(stacked.into_dimensionality().expect("rank 4")))
}

/// Randomly ordered `[real ‖ fake]` / `[fake ‖ real]` pairs and their labels.
pub fn random_concat<S: Scalar, R: Rng + ?Sized>(
    x_real: &ImageTensor<S>,
    x_fake: &ImageTensor<S>,
    rng: &mut R,
) -> Result<(ImageTensor<S>, Vec<bool>)> {
    x_real.check_same_shape(x_fake)?;
    let order = draw_order(x_real.batch(), rng);
    Ok((concat_in_order(x_real, x_fake, &order)?, order))
}

pub fn labels<S: Scalar>(y: &[bool]) -> Vec<S> {
    y.iter().map(|&b| if b { S::one() } else { S::zero() }).collect()
}

/// Whether any prediction falls outside [ε, 1 − ε].
pub fn needs_clamp<S: Scalar>(pred: &[S]) -> bool {
    pred.iter().any(|p| {
        let p = p.as_f64();
        !(BCE_EPS..=1.0 - BCE_EPS).contains(&p)
    })
}

/// Mean binary cross-entropy with predictions clamped to [ε, 1 − ε].
pub fn discriminator_loss<S: Scalar>(pred: &[S], y: &[bool]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::arg(format!("{} predictions for {} labels", pred.len(), y.len())));
    }
    if pred.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if needs_clamp(pred) {
        log::debug!("discriminator loss: clamping predictions to [{BCE_EPS}, 1 - {BCE_EPS}]");
    }
    let p: Vec<f64> = pred.iter().map(|v| v.as_f64()).collect();
    Ok(bce_value(&p, &labels::<f64>(y), BCE_EPS))
}

/// Fraction of elements where `pred > 0.5` agrees with the label; exact 0.5
/// counts as wrong.
pub fn batch_accuracy<S: Scalar>(pred: &[S], y: &[bool]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let half = S::lit(0.5);
    let hits = pred
        .iter()
        .zip(y)
        .filter(|(&p, &label)| p != half && (p > half) == label)
        .count();
    hits as f64 / pred.len() as f64
}

/// Per-step training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_g: f64,
    pub acc_batch: f64,
    pub s_used: usize,
    pub lambda_adv: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_mse, self.l_d, self.l_adv, self.l_g, self.acc_batch].iter().all(|v| v.is_finite())
    }
}

pub fn mse<S: Scalar>(a: &LatentTensor<S>, b: &LatentTensor<S>) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.0.len().max(1) as f64;
    Ok(a.0.iter().zip(b.0.iter()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n)
}

/// L_mse, L_adv = −L_D and L_G = L_mse + λ_adv·L_adv. `acc_batch` and
/// `s_used` are left at zero for the caller to fill in.
pub fn generator_loss<S: Scalar>(z0: &LatentTensor<S>, z0_hat: &LatentTensor<S>, l_d: f64, lambda_adv: f64) -> Result<LossReport> {
    if !(lambda_adv >= 0.0) {
        return Err(Error::arg(format!("lambda_adv must be non-negative, got {lambda_adv}")));
    }
    let l_mse = mse(z0, z0_hat)?;
    Ok(combine(l_mse, l_d, lambda_adv))
}

pub(crate) fn combine(l_mse: f64, l_d: f64, lambda_adv: f64) -> LossReport {
    let l_adv = -l_d;
    LossReport {
        l_mse,
        l_d,
        l_adv,
        l_g: l_mse + lambda_adv * l_adv,
        acc_batch: 0.0,
        s_used: 0,
        lambda_adv,
    }
}
