//! Fidelity metrics, the perceptual-distance slot, timing and the benchmark
//! and step-sweep tables.
//!
//! Metric inputs use the model convention ([−1, 1]); every metric rescales
//! to [0, 1] and clamps before comparing. Colour metrics are over RGB.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Codec;
use crate::data::{stack, PairedSample};
use crate::diffusion::{sample, SamplerConfig, SamplingMethod};
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn to_unit<S: Scalar>(x: &ImageTensor<S>) -> Array4<f64> {
    x.0.mapv(|v| ((v.as_f64() + 1.0) * 0.5).clamp(0.0, 1.0))
}

fn check<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<()> {
    a.check_same_shape(b)
}

/// Mean squared error on [0, 1] pixels.
pub fn mse<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    check(a, b)?;
    let (a, b) = (to_unit(a), to_unit(b));
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64)
}

/// `−10·log10(mse)` for peak 1.0; identical inputs give [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let k = w.len();
    let (h, wd) = x.dim();
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for xx in 0..ow {
            tmp[[y, xx]] = (0..k).map(|i| w[i] * x[[y, xx + i]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for xx in 0..ow {
            out[[y, xx]] = (0..k).map(|i| w[i] * tmp[[y + i, xx]]).sum::<f64>();
        }
    }
    out
}

fn luma(x: &Array4<f64>, b: usize) -> Array2<f64> {
    let img = x.index_axis(Axis(0), b);
    if img.shape()[0] == 1 {
        return img.index_axis(Axis(0), 0).to_owned();
    }
    let (r, g, bl) = (img.slice(s![0, .., ..]), img.slice(s![1, .., ..]), img.slice(s![2, .., ..]));
    &r * 0.299 + &g * 0.587 + &bl * 0.114
}

/// Mean SSIM over the luma map (11×11 Gaussian, σ = 1.5, K1 = 0.01,
/// K2 = 0.03), averaged over the batch.
pub fn ssim<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    check(a, b)?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if c != 3 && c != 1 {
        return Err(Error::arg(format!("SSIM needs 1 or 3 channels, got {c}")));
    }
    let (ua, ub) = (to_unit(a), to_unit(b));
    let win = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (luma(&ua, i), luma(&ub, i));
        let mx = filter_valid(&x, &win);
        let my = filter_valid(&y, &win);
        let sxx = filter_valid(&(&x * &x), &win) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &win) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &win) - &mx * &my;
        let num = (&mx * &my * 2.0 + c1) * (&sxy * 2.0 + c2);
        let den = (&mx * &mx + &my * &my + c1) * (&sxx + &syy + c2);
        total += (num / den).mean().unwrap_or(1.0);
    }
    Ok(total / n as f64)
}

/// A perceptual distance with `distance(x, x) = 0`.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64>;
}

/// Mean of per-level MSE over a 2×2 box-filtered pyramid.
#[derive(Debug, Clone)]
pub struct PyramidMse {
    pub levels: usize,
}

impl Default for PyramidMse {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

fn box_down(x: &Array4<f64>) -> Array4<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2] / 2, x.shape()[3] / 2];
    Array4::from_shape_fn((n, c, h, w), |(b, ch, y, xx)| {
        0.25 * (x[[b, ch, 2 * y, 2 * xx]] + x[[b, ch, 2 * y + 1, 2 * xx]] + x[[b, ch, 2 * y, 2 * xx + 1]] + x[[b, ch, 2 * y + 1, 2 * xx + 1]])
    })
}

impl PerceptualMetric for PyramidMse {
    fn name(&self) -> &str {
        "pyramid_mse"
    }

    fn distance(&self, a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
        check(a, b)?;
        let (mut x, mut y) = (to_unit(a), to_unit(b));
        let mut total = 0.0;
        let mut used = 0;
        for level in 0..self.levels.max(1) {
            if level > 0 {
                if x.shape()[2] < 2 || x.shape()[3] < 2 {
                    break;
                }
                x = box_down(&x);
                y = box_down(&y);
            }
            total += x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len().max(1) as f64;
            used += 1;
        }
        Ok(total / used as f64)
    }
}

/// `None` without a plugin, or when the plugin fails (logged).
pub fn perceptual_distance<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>, plugin: Option<&dyn PerceptualMetric>) -> Option<f64> {
    let plugin = plugin?;
    match plugin.distance(&a.cast(), &b.cast()) {
        Ok(d) if d.is_finite() && d >= 0.0 => Some(d),
        Ok(d) => {
            log::warn!("perceptual plugin {} returned {d}; reporting it as absent", plugin.name());
            None
        }
        Err(e) => {
            log::warn!("perceptual plugin {} failed: {e}", plugin.name());
            None
        }
    }
}

/// Generator, codec and schedule: everything needed to upscale.
pub struct SrPipeline<'a, S> {
    pub generator: &'a Generator<S>,
    pub codec: &'a Codec<S>,
    pub schedule: &'a NoiseSchedule,
}

impl<S: Scalar> SrPipeline<'_, S> {
    /// Pre-upsampled `x_low` → encode → reverse diffusion → decode.
    pub fn upscale(&self, x_low: &ImageTensor<S>, config: &SamplerConfig, seed: u64) -> Result<ImageTensor<S>> {
        let z_low = self.codec.encode(x_low)?;
        let z0 = sample(self.generator, &z_low, self.schedule, config, seed)?;
        self.codec.decode(&z0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub method: String,
    pub steps: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub perceptual: Option<f64>,
    /// Seconds; warm-up batch excluded.
    pub time_per_batch: f64,
    pub images: usize,
}

/// Accumulates metrics over batches.
struct Accumulator {
    mse: f64,
    ssim: f64,
    perceptual: Option<f64>,
    images: usize,
}

impl Accumulator {
    fn new(with_plugin: bool) -> Self {
        Self {
            mse: 0.0,
            ssim: 0.0,
            perceptual: with_plugin.then_some(0.0),
            images: 0,
        }
    }

    fn add<S: Scalar>(&mut self, out: &ImageTensor<S>, target: &ImageTensor<S>, plugin: Option<&dyn PerceptualMetric>) -> Result<()> {
        let n = out.batch();
        self.mse += mse(out, target)? * n as f64;
        self.ssim += ssim(out, target)? * n as f64;
        if let Some(acc) = self.perceptual {
            self.perceptual = perceptual_distance(out, target, plugin).map(|d| acc + d * n as f64);
        }
        self.images += n;
        Ok(())
    }

    fn report(&self, model: &str, dataset: &str, method: &str, steps: usize, time_per_batch: f64) -> MetricsReport {
        let n = self.images.max(1) as f64;
        let mse = self.mse / n;
        MetricsReport {
            model: model.to_string(),
            dataset: dataset.to_string(),
            method: method.to_string(),
            steps,
            psnr: psnr_from_mse(mse),
            ssim: self.ssim / n,
            mse,
            perceptual: self.perceptual.map(|p| p / n),
            time_per_batch,
            images: self.images,
        }
    }
}

/// Benchmark settings shared by [`benchmark`] and [`step_sweep`].
pub struct BenchSettings<'a> {
    pub model_id: String,
    pub dataset_id: String,
    pub batch_size: usize,
    pub seed: u64,
    pub perceptual: Option<&'a dyn PerceptualMetric>,
}

fn batches<S: Scalar>(samples: &[PairedSample<S>], batch_size: usize) -> Result<Vec<(ImageTensor<S>, ImageTensor<S>)>> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    samples
        .chunks(batch_size)
        .map(|c| stack(c.to_vec()).map(|b| (b.x0, b.x_low)))
        .collect()
}

/// The degraded input scored against the ground truth.
pub fn bicubic_row<S: Scalar>(samples: &[PairedSample<S>], settings: &BenchSettings) -> Result<MetricsReport> {
    let mut acc = Accumulator::new(settings.perceptual.is_some());
    for (x0, x_low) in batches(samples, settings.batch_size)? {
        acc.add(&x_low, &x0, settings.perceptual)?;
    }
    Ok(acc.report("bicubic", &settings.dataset_id, "bicubic", 0, 0.0))
}

fn run_config<S: Scalar>(
    pipeline: &SrPipeline<S>,
    batches: &[(ImageTensor<S>, ImageTensor<S>)],
    config: &SamplerConfig,
    settings: &BenchSettings,
) -> Result<MetricsReport> {
    let mut acc = Accumulator::new(settings.perceptual.is_some());
    let mut times = Vec::with_capacity(batches.len());
    for (i, (x0, x_low)) in batches.iter().enumerate() {
        let start = Instant::now();
        let out = pipeline.upscale(x_low, config, settings.seed.wrapping_add(i as u64))?;
        times.push(start.elapsed().as_secs_f64());
        acc.add(&out, x0, settings.perceptual)?;
    }
    let timed = if times.len() > 1 { &times[1..] } else { &times[..] };
    let time_per_batch = timed.iter().sum::<f64>() / timed.len() as f64;
    Ok(acc.report(&settings.model_id, &settings.dataset_id, &config.method.to_string(), config.num_steps, time_per_batch))
}

/// One row per sampler config plus a leading bicubic reference row.
pub fn benchmark<S: Scalar>(
    pipeline: &SrPipeline<S>,
    samples: &[PairedSample<S>],
    configs: &[SamplerConfig],
    settings: &BenchSettings,
) -> Result<Vec<MetricsReport>> {
    let b = batches(samples, settings.batch_size)?;
    let mut rows = vec![bicubic_row(samples, settings)?];
    for cfg in configs {
        cfg.validate(pipeline.schedule.timesteps())?;
        rows.push(run_config(pipeline, &b, cfg, settings)?);
    }
    Ok(rows)
}

/// Grid over methods × step counts.
pub fn step_sweep<S: Scalar>(
    pipeline: &SrPipeline<S>,
    samples: &[PairedSample<S>],
    steps: &[usize],
    methods: &[SamplingMethod],
    settings: &BenchSettings,
) -> Result<Vec<MetricsReport>> {
    let t = pipeline.schedule.timesteps();
    if let Some(bad) = steps.iter().find(|&&n| n == 0 || n > t) {
        return Err(Error::arg(format!("step count {bad} outside 1..={t}")));
    }
    let b = batches(samples, settings.batch_size)?;
    let mut rows = Vec::new();
    for &method in methods {
        for &n in steps {
            rows.push(run_config(pipeline, &b, &SamplerConfig::new(method, n), settings)?);
        }
    }
    Ok(rows)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

pub fn write_csv(rows: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["model", "dataset", "method", "steps", "psnr", "ssim", "mse", "perceptual", "time_per_batch", "images"])
        .and_then(|_| {
            for r in rows {
                w.write_record([
                    r.model.clone(),
                    r.dataset.clone(),
                    r.method.clone(),
                    r.steps.to_string(),
                    format!("{:.6}", r.psnr),
                    format!("{:.6}", r.ssim),
                    format!("{:.8}", r.mse),
                    r.perceptual.map(|p| format!("{p:.8}")).unwrap_or_default(),
                    format!("{:.6}", r.time_per_batch),
                    r.images.to_string(),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json(rows: &[MetricsReport], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows).expect("reports serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{degrade, synthetic_image, PairedDataset};
    use crate::networks::GeneratorConfig;
    use crate::rng::seeded;
    use proptest::prelude::*;

    /// Builds a [−1, 1] image from [0, 1] values.
    fn unit(shape: [usize; 4], values: Vec<f64>) -> ImageTensor<f64> {
        ImageTensor::from_shape_vec(shape, values.into_iter().map(|v| 2.0 * v - 1.0).collect()).unwrap()
    }

    fn checker(size: usize) -> ImageTensor<f64> {
        let v: Vec<f64> = (0..3 * size * size)
            .map(|i| {
                let (y, x) = ((i / size) % size, i % size);
                ((x + y) % 2) as f64
            })
            .collect();
        unit([1, 3, size, size], v)
    }

    #[test]
    fn mse_golden_values() {
        let a = unit([1, 1, 1, 2], vec![0.0, 0.5]);
        let b = unit([1, 1, 1, 2], vec![0.5, 0.5]);
        assert!((mse(&a, &b).unwrap() - 0.125).abs() < 1e-12);
        let z = unit([1, 3, 4, 4], vec![0.0; 48]);
        let o = unit([1, 3, 4, 4], vec![1.0; 48]);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert!(mse(&a, &z).is_err());
    }

    #[test]
    fn psnr_golden_values() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let x = checker(12);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_golden_values() {
        let x = ImageTensor::<f64>::randn([2, 3, 16, 16], &mut seeded(1)).clamp_unit();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = checker(16);
        let inv = ImageTensor(c.0.mapv(|v| -v));
        assert!(ssim(&c, &inv).unwrap() < 0.0);
        let a = ImageTensor::<f64>::from_elem([1, 3, 12, 12], 0.2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = ImageTensor::<f64>::from_elem([1, 3, 12, 12], -0.4);
        assert!(ssim(&a, &b).unwrap() < 1.0);
        let small = ImageTensor::<f64>::zeros([1, 3, 10, 12]);
        assert!(matches!(ssim(&small, &small), Err(Error::Argument(_))));
    }

    #[test]
    fn perceptual_contract() {
        let x = synthetic_image::<f64, _>(32, &mut seeded(2));
        let plugin = PyramidMse::default();
        assert_eq!(perceptual_distance(&x, &x, Some(&plugin)), Some(0.0));
        assert_eq!(perceptual_distance(&x, &x, None), None);
        let d = perceptual_distance(&x, &degrade(&x, 4).unwrap(), Some(&plugin)).unwrap();
        assert!(d > 0.0);

        struct Broken;
        impl PerceptualMetric for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn distance(&self, _: &ImageTensor<f64>, _: &ImageTensor<f64>) -> Result<f64> {
                Err(Error::Plugin("no weights".into()))
            }
        }
        assert_eq!(perceptual_distance(&x, &x, Some(&Broken)), None);
    }

    fn images(seed: u64) -> (ImageTensor<f64>, ImageTensor<f64>) {
        let a = synthetic_image::<f64, _>(16, &mut seeded(seed));
        let b = synthetic_image::<f64, _>(16, &mut seeded(seed + 100));
        (ImageTensor(a.0.mapv(|v| 0.8 * v)), ImageTensor(b.0.mapv(|v| 0.8 * v)))
    }

    proptest! {
        #[test]
        fn psnr_mse_duality(seed in 0u64..1000) {
            let (a, b) = images(seed);
            let m = mse(&a, &b).unwrap();
            prop_assume!(m > 0.0);
            prop_assert!((psnr(&a, &b).unwrap() + 10.0 * m.log10()).abs() < 1e-9);
        }

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let (a, b) = images(seed);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn common_shift_keeps_mse(seed in 0u64..1000, shift in -0.19f64..0.19) {
            let (a, b) = images(seed);
            let (sa, sb) = (ImageTensor(a.0.mapv(|v| v + shift)), ImageTensor(b.0.mapv(|v| v + shift)));
            prop_assert!((mse(&a, &b).unwrap() - mse(&sa, &sb).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn r2_of_exact_line() {
        assert!((linear_fit_r2(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!(linear_fit_r2(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, 1.0, -1.0]) < 0.5);
    }

    fn tiny_generator() -> Generator<f64> {
        let cfg = GeneratorConfig {
            base_width: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attention_at_lowest: false,
            time_dim: 16,
            groups: 4,
            stem_factor: 1,
            residual_condition: true,
            output_gain: 0.1,
        };
        Generator::new(cfg, 3, 50, &mut seeded(3)).unwrap()
    }

    #[test]
    fn benchmark_rows_and_tables() {
        let gen = tiny_generator();
        let codec = Codec::Identity;
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let pipeline = SrPipeline {
            generator: &gen,
            codec: &codec,
            schedule: &schedule,
        };
        let samples = PairedDataset::<f64>::synthetic(3, 16, 4, 0).unwrap().all(1).unwrap();
        let plugin = PyramidMse::default();
        let settings = BenchSettings {
            model_id: "tiny".into(),
            dataset_id: "synthetic".into(),
            batch_size: 2,
            seed: 5,
            perceptual: Some(&plugin),
        };
        let configs = [SamplerConfig::new(SamplingMethod::Deterministic, 2), SamplerConfig::new(SamplingMethod::Ancestral, 3)];
        let rows = benchmark(&pipeline, &samples, &configs, &settings).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].method, "bicubic");
        let expect = mse(&stack(samples.clone()).unwrap().x_low, &stack(samples.clone()).unwrap().x0).unwrap();
        assert!((rows[0].mse - expect).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.images == 3 && r.perceptual.is_some() && r.psnr.is_finite()));
        let again = benchmark(&pipeline, &samples, &configs, &settings).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!((a.mse, a.ssim, a.psnr, a.perceptual), (b.mse, b.ssim, b.psnr, b.perceptual));
        }

        let dir = tempfile::tempdir().unwrap();
        write_csv(&rows, &dir.path().join("t.csv")).unwrap();
        write_json(&rows, &dir.path().join("t.json")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("model,dataset,method,steps,psnr"));
        let back: Vec<MetricsReport> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
        assert_eq!(back.len(), 3);

        let sweep = step_sweep(
            &pipeline,
            &samples,
            &[1, 3],
            &[SamplingMethod::Ancestral, SamplingMethod::Deterministic],
            &settings,
        )
        .unwrap();
        assert_eq!(sweep.len(), 4);
        assert!(step_sweep(&pipeline, &samples, &[51], &[SamplingMethod::Ancestral], &settings).is_err());
        assert!(matches!(benchmark(&pipeline, &[], &configs, &settings), Err(Error::Config(_))));
    }
}
