//! Forward noising, single reverse steps driven by a clean-latent estimate,
//! and the sampling loop.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Denoiser;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    /// DDPM.
    #[serde(alias = "ddpm")]
    Ancestral,
    /// DDIM.
    #[serde(alias = "ddim")]
    Deterministic,
}

impl std::str::FromStr for SamplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ancestral" | "ddpm" => Ok(Self::Ancestral),
            "deterministic" | "ddim" => Ok(Self::Deterministic),
            other => Err(Error::arg(format!("unknown sampling method '{other}' (expected ddpm or ddim)"))),
        }
    }
}

impl std::fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ancestral => "ddpm",
            Self::Deterministic => "ddim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: SamplingMethod,
    pub num_steps: usize,
    /// Only read by the deterministic sampler.
    pub eta: f64,
    pub spacing: Spacing,
    /// Optional symmetric clamp on every ẑ_0 estimate.
    pub clip_latent: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplingMethod::Deterministic,
            num_steps: 10,
            eta: 0.0,
            spacing: Spacing::Uniform,
            clip_latent: None,
        }
    }
}

impl SamplerConfig {
    pub fn new(method: SamplingMethod, num_steps: usize) -> Self {
        Self {
            method,
            num_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > timesteps {
            return Err(Error::arg(format!("num_steps must be in 1..={timesteps}, got {}", self.num_steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::arg(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if matches!(self.clip_latent, Some(c) if !(c > 0.0)) {
            return Err(Error::arg("clip_latent must be positive"));
        }
        Ok(())
    }
}

fn lincomb<S: Scalar>(a: f64, x: &Array4<S>, b: f64, y: &Array4<S>) -> Array4<S> {
    let (a, b) = (S::lit(a), S::lit(b));
    let mut out = x.clone();
    out.zip_mut_with(y, |o, &v| *o = a * *o + b * v);
    out
}

fn add_scaled<S: Scalar>(out: &mut Array4<S>, c: f64, y: &Array4<S>) {
    if c != 0.0 {
        let c = S::lit(c);
        out.zip_mut_with(y, |o, &v| *o = *o + c * v);
    }
}

/// Marginal sample √ᾱ_t·z0 + √(1−ᾱ_t)·noise.
pub fn forward_diffuse<S: Scalar>(
    z0: &LatentTensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &LatentTensor<S>,
) -> Result<LatentTensor<S>> {
    z0.check_same_shape(noise)?;
    schedule.check_timestep(t)?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = schedule.alpha_bar(t);
    Ok(LatentTensor(lincomb(ab.sqrt(), &z0.0, (1.0 - ab).sqrt(), &noise.0)))
}

/// Per-element timesteps; element `i` of the batch is noised to `t[i]`.
pub fn forward_diffuse_batch<S: Scalar>(
    z0: &LatentTensor<S>,
    t: &[usize],
    schedule: &NoiseSchedule,
    noise: &LatentTensor<S>,
) -> Result<LatentTensor<S>> {
    z0.check_same_shape(noise)?;
    if t.len() != z0.batch() {
        return Err(Error::arg(format!("{} timesteps for a batch of {}", t.len(), z0.batch())));
    }
    let mut out = z0.0.clone();
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_timestep(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        let mut slot = out.index_axis_mut(ndarray::Axis(0), i);
        slot.zip_mut_with(&noise.0.index_axis(ndarray::Axis(0), i), |o, &n| *o = a * *o + b * n);
    }
    Ok(LatentTensor(out))
}

/// One ancestral step t → t−1 using the posterior with ẑ_0 in place of z_0.
pub fn ddpm_step<S: Scalar>(
    z_t: &LatentTensor<S>,
    t: usize,
    z0_hat: &LatentTensor<S>,
    schedule: &NoiseSchedule,
    noise: &LatentTensor<S>,
) -> Result<LatentTensor<S>> {
    z_t.check_same_shape(z0_hat)?;
    z_t.check_same_shape(noise)?;
    let c = schedule.posterior_coefficients(t)?;
    let mut out = lincomb(c.coef_xt, &z_t.0, c.coef_x0, &z0_hat.0);
    add_scaled(&mut out, c.variance.sqrt(), &noise.0);
    Ok(LatentTensor(out))
}

/// Generalized step t → t_prev. `eta = 0` is deterministic; `eta = 1`
/// samples the exact posterior q(z_{t_prev} | z_t, ẑ_0).
pub fn ddim_step<S: Scalar>(
    z_t: &LatentTensor<S>,
    t: usize,
    t_prev: usize,
    z0_hat: &LatentTensor<S>,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: &LatentTensor<S>,
) -> Result<LatentTensor<S>> {
    z_t.check_same_shape(z0_hat)?;
    z_t.check_same_shape(noise)?;
    schedule.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::arg(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    if 1.0 - ab <= 0.0 {
        return Err(Error::DegenerateSchedule(format!("alpha_bar at t = {t} is 1")));
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    // ε̂ = (z_t − √ᾱ_t ẑ_0) / √(1 − ᾱ_t), folded into the coefficients
    let e_zt = dir / (1.0 - ab).sqrt();
    let e_z0 = ab_prev.sqrt() - e_zt * ab.sqrt();
    let mut out = lincomb(e_z0, &z0_hat.0, e_zt, &z_t.0);
    add_scaled(&mut out, sigma, &noise.0);
    Ok(LatentTensor(out))
}

/// `num_steps` timesteps from T downward with stride ⌊T / num_steps⌋.
pub fn timestep_spacing(timesteps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > timesteps {
        return Err(Error::arg(format!("num_steps must be in 1..={timesteps}, got {num_steps}")));
    }
    let stride = timesteps / num_steps;
    Ok((0..num_steps).map(|i| timesteps - i * stride).collect())
}

/// `(t, t_prev)` pairs for the reverse loop; the last `t_prev` is 0.
pub fn step_pairs(timesteps: usize, num_steps: usize) -> Result<Vec<(usize, usize)>> {
    let ts = timestep_spacing(timesteps, num_steps)?;
    Ok(ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0))).collect())
}

/// Reverse process from z_T ~ N(0, I) conditioned on `z_low`; returns the
/// final clean-latent estimate.
pub fn sample<S: Scalar, D: Denoiser<S> + ?Sized>(
    model: &D,
    z_low: &LatentTensor<S>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
) -> Result<LatentTensor<S>> {
    config.validate(schedule.timesteps())?;
    let mut rng = seeded(seed);
    let shape = z_low.shape();
    let mut z_t = LatentTensor::randn(shape, &mut rng);
    let mut z0_hat = z_t.clone();
    for (t, t_prev) in step_pairs(schedule.timesteps(), config.num_steps)? {
        let ts = vec![t; shape[0]];
        z0_hat = model.predict_clean(&z_t, &ts, z_low)?;
        if let Some(c) = config.clip_latent {
            let c = S::lit(c);
            z0_hat.0.mapv_inplace(|v| v.max(-c).min(c));
        }
        if t_prev == 0 && config.method == SamplingMethod::Deterministic {
            break;
        }
        let noise = LatentTensor::randn(shape, &mut rng);
        z_t = match config.method {
            SamplingMethod::Ancestral if t_prev + 1 == t => ddpm_step(&z_t, t, &z0_hat, schedule, &noise)?,
            SamplingMethod::Ancestral => ddim_step(&z_t, t, t_prev, &z0_hat, schedule, 1.0, &noise)?,
            SamplingMethod::Deterministic => ddim_step(&z_t, t, t_prev, &z0_hat, schedule, config.eta, &noise)?,
        };
    }
    Ok(z0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};
    use proptest::prelude::*;
    use std::cell::RefCell;

    fn scalar(v: f64) -> LatentTensor<f64> {
        LatentTensor::from_elem([1, 1, 1, 1], v)
    }

    fn half_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.5, 0.5).unwrap()
    }

    struct Constant(f64);

    impl Denoiser<f64> for Constant {
        fn predict_clean(&self, z_t: &LatentTensor<f64>, _: &[usize], _: &LatentTensor<f64>) -> Result<LatentTensor<f64>> {
            Ok(LatentTensor::from_elem(z_t.shape(), self.0))
        }
    }

    /// Records every call and returns a function of its inputs.
    struct Recorder(RefCell<Vec<(LatentTensor<f64>, Vec<usize>)>>);

    impl Denoiser<f64> for Recorder {
        fn predict_clean(&self, z_t: &LatentTensor<f64>, t: &[usize], z_low: &LatentTensor<f64>) -> Result<LatentTensor<f64>> {
            self.0.borrow_mut().push((z_t.clone(), t.to_vec()));
            Ok(LatentTensor(&z_t.0 * 0.5 + &z_low.0 + t[0] as f64 * 1e-3))
        }
    }

    #[test]
    fn forward_diffuse_edge_cases() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded(1);
        let z0 = LatentTensor::<f64>::randn([2, 3, 4, 4], &mut rng);
        let noise = LatentTensor::randn([2, 3, 4, 4], &mut rng);
        assert_eq!(forward_diffuse(&z0, 0, &s, &noise).unwrap(), z0);
        let mean = forward_diffuse(&z0, 500, &s, &LatentTensor::zeros([2, 3, 4, 4])).unwrap();
        let k = s.alpha_bar(500).sqrt();
        assert!(mean.0.iter().zip(z0.0.iter()).all(|(m, z)| (m - k * z).abs() < 1e-15));
        let wrong = LatentTensor::zeros([2, 3, 4, 5]);
        assert!(matches!(forward_diffuse(&z0, 3, &s, &wrong), Err(Error::Shape { .. })));
        assert!(matches!(forward_diffuse(&z0, 1001, &s, &noise), Err(Error::Argument(_))));
    }

    #[test]
    fn forward_diffuse_batch_uses_each_timestep() {
        let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        let mut rng = seeded(2);
        let z0 = LatentTensor::<f64>::randn([3, 2, 2, 2], &mut rng);
        let noise = LatentTensor::randn([3, 2, 2, 2], &mut rng);
        let out = forward_diffuse_batch(&z0, &[0, 4, 10], &s, &noise).unwrap();
        for (i, t) in [0, 4, 10].into_iter().enumerate() {
            let single = forward_diffuse(&z0.slice_batch(i, i + 1), t, &s, &noise.slice_batch(i, i + 1)).unwrap();
            assert_eq!(out.slice_batch(i, i + 1), single);
        }
    }

    #[test]
    fn forward_marginal_monte_carlo() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded(3);
        let n = 100_000;
        let z0 = 0.8;
        let t = 300;
        let noise = LatentTensor::<f64>::randn([n, 1, 1, 1], &mut rng);
        let x = forward_diffuse(&LatentTensor::from_elem([n, 1, 1, 1], z0), t, &s, &noise).unwrap();
        let mean = x.0.mean().unwrap();
        let var = x.0.mapv(|v| (v - mean).powi(2)).sum() / (n as f64 - 1.0);
        let sd = (1.0 - s.alpha_bar(t)).sqrt();
        assert!((mean - s.alpha_bar(t).sqrt() * z0).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((var / (1.0 - s.alpha_bar(t)) - 1.0).abs() < 0.05);
    }

    #[test]
    fn ddpm_step_oracles() {
        let s = half_schedule();
        let out = ddpm_step(&scalar(1.0), 2, &scalar(1.0), &s, &scalar(0.0)).unwrap();
        let expect = 2.0 * 0.5f64.sqrt() * 0.5 / 0.75;
        assert!((out.0[[0, 0, 0, 0]] - expect).abs() < 1e-15);
        assert!((out.0[[0, 0, 0, 0]] - 0.9428).abs() < 1e-4);

        let z0 = scalar(0.3);
        let at1 = ddpm_step(&scalar(-2.0), 1, &z0, &s, &scalar(5.0)).unwrap();
        assert_eq!(at1, z0);

        let s = NoiseSchedule::from_betas(vec![0.1, 0.0]).unwrap();
        let z_t = scalar(0.7);
        let out = ddpm_step(&z_t, 2, &scalar(9.0), &s, &scalar(3.0)).unwrap();
        assert!((out.0[[0, 0, 0, 0]] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn full_chain_reconstructs_without_noise() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let z0 = LatentTensor::<f64>::randn([1, 2, 3, 3], &mut seeded(4));
        let zero = LatentTensor::zeros(z0.shape());
        let mut z = forward_diffuse(&z0, 200, &s, &zero).unwrap();
        for t in (1..=200).rev() {
            z = ddpm_step(&z, t, &z0, &s, &zero).unwrap();
        }
        assert!(z.0.iter().zip(z0.0.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ddim_step_oracles() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded(5);
        let z_t = LatentTensor::<f64>::randn([2, 2, 3, 3], &mut rng);
        let z0_hat = LatentTensor::randn([2, 2, 3, 3], &mut rng);
        let noise = LatentTensor::randn([2, 2, 3, 3], &mut rng);
        let out = ddim_step(&z_t, 1000, 0, &z0_hat, &s, 0.0, &noise).unwrap();
        assert!(out.0.iter().zip(z0_hat.0.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let a = ddim_step(&z_t, 700, 300, &z0_hat, &s, 0.0, &noise).unwrap();
        let b = ddim_step(&z_t, 700, 300, &z0_hat, &s, 0.0, &noise).unwrap();
        assert_eq!(a, b);
        assert!(matches!(ddim_step(&z_t, 300, 300, &z0_hat, &s, 0.0, &noise), Err(Error::Argument(_))));
        let flat = NoiseSchedule::linear(2, 0.0, 0.0).unwrap();
        assert!(matches!(
            ddim_step(&z_t, 2, 1, &z0_hat, &flat, 0.0, &noise),
            Err(Error::DegenerateSchedule(_))
        ));
    }

    #[test]
    fn ddim_is_idempotent_in_clean_estimate_at_zero() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let mut rng = seeded(6);
        let z0_hat = LatentTensor::<f64>::randn([1, 1, 2, 2], &mut rng);
        let noise = LatentTensor::zeros([1, 1, 2, 2]);
        let once = ddim_step(&LatentTensor::randn([1, 1, 2, 2], &mut rng), 50, 0, &z0_hat, &s, 0.0, &noise).unwrap();
        let twice = ddim_step(&once, 1, 0, &once, &s, 0.0, &noise).unwrap();
        assert!(twice.0.iter().zip(once.0.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ddim_eta_one_matches_ddpm_distribution() {
        let s = half_schedule();
        let mut rng = seeded(7);
        let n = 100_000;
        let (z_t, z0_hat) = (1.3, -0.4);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let e1 = scalar(normal(&mut rng));
            let e2 = scalar(normal(&mut rng));
            a.push(ddim_step(&scalar(z_t), 2, 1, &scalar(z0_hat), &s, 1.0, &e1).unwrap().0[[0, 0, 0, 0]]);
            b.push(ddpm_step(&scalar(z_t), 2, &scalar(z0_hat), &s, &e2).unwrap().0[[0, 0, 0, 0]]);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0))
        };
        let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
        assert!((ma / mb - 1.0).abs() < 0.05, "{ma} vs {mb}");
        assert!((va / vb - 1.0).abs() < 0.05, "{va} vs {vb}");
    }

    #[test]
    fn spacing_examples() {
        assert_eq!(timestep_spacing(1000, 1).unwrap(), vec![1000]);
        assert_eq!(timestep_spacing(1000, 1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
        assert_eq!(timestep_spacing(10, 5).unwrap(), vec![10, 8, 6, 4, 2]);
        assert_eq!(step_pairs(10, 5).unwrap(), vec![(10, 8), (8, 6), (6, 4), (4, 2), (2, 0)]);
        assert!(matches!(timestep_spacing(10, 11), Err(Error::Argument(_))));
        assert!(matches!(timestep_spacing(10, 0), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn spacing_is_strictly_decreasing(t in 1usize..2000, frac in 0.0f64..1.0) {
            let n = 1 + ((t - 1) as f64 * frac) as usize;
            let ts = timestep_spacing(t, n).unwrap();
            prop_assert_eq!(ts.len(), n);
            prop_assert_eq!(ts[0], t);
            prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(*ts.last().unwrap() >= 1);
        }
    }

    #[test]
    fn single_step_sample_is_one_model_call() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z_low = LatentTensor::<f64>::randn([2, 3, 4, 4], &mut seeded(8));
        let rec = Recorder(RefCell::new(Vec::new()));
        for method in [SamplingMethod::Ancestral, SamplingMethod::Deterministic] {
            rec.0.borrow_mut().clear();
            let out = sample(&rec, &z_low, &s, &SamplerConfig::new(method, 1), 11).unwrap();
            let calls = rec.0.borrow().clone();
            assert_eq!(calls.len(), 1);
            assert_eq!(calls[0].1, vec![1000, 1000]);
            let z_t = LatentTensor::<f64>::randn([2, 3, 4, 4], &mut seeded(11));
            assert_eq!(calls[0].0, z_t);
            assert_eq!(out, rec.predict_clean(&z_t, &[1000, 1000], &z_low).unwrap());
        }
    }

    #[test]
    fn constant_model_yields_constant() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let z_low = LatentTensor::zeros([1, 2, 3, 3]);
        for method in [SamplingMethod::Ancestral, SamplingMethod::Deterministic] {
            for steps in [1, 3, 7, 100] {
                let cfg = SamplerConfig { eta: 0.5, ..SamplerConfig::new(method, steps) };
                let out = sample(&Constant(0.25), &z_low, &s, &cfg, 3).unwrap();
                assert!(out.0.iter().all(|&v| v == 0.25));
            }
        }
    }

    #[test]
    fn seeding_contract() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let z_low = LatentTensor::<f64>::randn([1, 2, 3, 3], &mut seeded(9));
        let rec = Recorder(RefCell::new(Vec::new()));
        let cfg = SamplerConfig::new(SamplingMethod::Ancestral, 10);
        let a = sample(&rec, &z_low, &s, &cfg, 1).unwrap();
        let b = sample(&rec, &z_low, &s, &cfg, 1).unwrap();
        let c = sample(&rec, &z_low, &s, &cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let det = SamplerConfig::new(SamplingMethod::Deterministic, 10);
        assert_eq!(sample(&rec, &z_low, &s, &det, 4).unwrap(), sample(&rec, &z_low, &s, &det, 4).unwrap());
    }

    #[test]
    fn sampler_config_validation() {
        assert!(SamplerConfig::new(SamplingMethod::Deterministic, 0).validate(10).is_err());
        assert!(SamplerConfig::new(SamplingMethod::Deterministic, 11).validate(10).is_err());
        let bad_eta = SamplerConfig { eta: 1.5, ..SamplerConfig::default() };
        assert!(bad_eta.validate(1000).is_err());
        assert_eq!("DDIM".parse::<SamplingMethod>().unwrap(), SamplingMethod::Deterministic);
        assert_eq!("ancestral".parse::<SamplingMethod>().unwrap(), SamplingMethod::Ancestral);
        assert!("euler".parse::<SamplingMethod>().is_err());
    }
}
