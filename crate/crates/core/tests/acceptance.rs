//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The two toy training runs behind criteria 5 to 7 take hours on one CPU
//! core, so their final checkpoints are cached under the cargo target tmp
//! directory keyed by config hash. Set `SUPRES_ACCEPTANCE_RETRAIN=1` to
//! ignore the cache.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::ArrayD;
use rand::Rng;
use supres_core::adversarial::{discriminator_loss, generator_loss, AdaptiveCorruptionState, DEFAULT_LAMBDA_ADV};
use supres_core::autoencoder::{AutoencoderSpec, Codec};
use supres_core::data::{stack, PairedDataset, PairedSample};
use supres_core::diffusion::{forward_diffuse, sample, SamplerConfig, SamplingMethod};
use supres_core::eval::{self, benchmark, linear_fit_r2, step_sweep, BenchSettings, PyramidMse, SrPipeline};
use supres_core::graph::Graph;
use supres_core::networks::{DiscriminatorConfig, Generator, GeneratorConfig};
use supres_core::rng::{derive, seeded};
use supres_core::schedule::NoiseSchedule;
use supres_core::tensor::{ImageTensor, LatentTensor};
use supres_core::trainer::{train, Checkpoint, Precision, TrainConfig};

type Outcome = (bool, String);

const TOY_STEPS: u64 = 4000;
const TOY_LR: f64 = 1e-3;
const TOY_PATCH: usize = 64;
const TOY_TRAIN_IMAGES: usize = 2000;
const TOY_TEST_IMAGES: usize = 32;

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        base_width: 8,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        attention_at_lowest: true,
        time_dim: 16,
        groups: 4,
        stem_factor: 1,
        residual_condition: true,
        output_gain: 0.1,
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seed,
        precision: Precision::F64,
        generator: tiny_generator(),
        discriminator: DiscriminatorConfig {
            widths: vec![8, 16],
            groups: 4,
            leaky_slope: 0.2,
        },
        ..TrainConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let mut rng = seeded(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let t = rng.random_range(1..=64usize);
        let schedule = match i % 3 {
            0 => {
                let a = rng.random_range(1e-5..0.05);
                NoiseSchedule::linear(t, a, rng.random_range(a..0.5)).unwrap()
            }
            1 => NoiseSchedule::cosine(t).unwrap(),
            _ => NoiseSchedule::from_betas((0..t).map(|_| rng.random_range(1e-4..0.9)).collect()).unwrap(),
        };
        let mut product = 1.0;
        for s in 1..=t {
            product *= 1.0 - schedule.beta(s);
            worst = worst.max((schedule.alpha_bar(s) - product).abs());
        }
    }
    let p = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap().posterior_coefficients(1).unwrap();
    let exact = p.coef_xt == 0.0 && p.coef_x0 == 1.0 && p.variance == 0.0;
    (
        worst <= 1e-12 && exact,
        format!("max |closed form - product| = {worst:.2e}, t=1 posterior = ({}, {}, {})", p.coef_xt, p.coef_x0, p.variance),
    )
}

fn criterion_2() -> Outcome {
    let n = 100_000;
    let mut rng = seeded(2);
    let mut worst = 0.0f64;
    let mut ok = true;
    for k in 0..5 {
        let t_max = rng.random_range(10..=1000usize);
        let schedule = if k % 2 == 0 {
            NoiseSchedule::linear(t_max, 1e-4, 0.02).unwrap()
        } else {
            NoiseSchedule::cosine(t_max).unwrap()
        };
        let t = rng.random_range(1..=t_max);
        let z0_value = rng.random_range(-1.5..1.5);
        let z0 = LatentTensor::<f64>::from_elem([n, 1, 1, 1], z0_value);
        let noise = LatentTensor::<f64>::randn([n, 1, 1, 1], &mut derive(2, k));
        let zt = forward_diffuse(&z0, t, &schedule, &noise).unwrap();
        let mean = zt.0.mean().unwrap();
        let var = zt.0.mapv(|v| (v - mean).powi(2)).sum() / (n as f64 - 1.0);
        let ab = schedule.alpha_bar(t);
        let (mu, sigma2) = (ab.sqrt() * z0_value, 1.0 - ab);
        // the mean is judged against the marginal's scale so that a mean
        // near zero does not demand unbounded relative precision
        let scale = mu.abs().max(sigma2.sqrt());
        let mean_err = (mean - mu).abs() / scale;
        let var_err = (var - sigma2).abs() / sigma2;
        worst = worst.max(mean_err).max(var_err);
        ok &= mean_err <= 0.05 && var_err <= 0.05;
    }
    (ok, format!("worst relative error {:.4} over 5 (t, schedule) pairs, n = {n}", worst))
}

fn criterion_3() -> Outcome {
    let at = |acc: f64| AdaptiveCorruptionState::new(1000, 0.05, acc).unwrap().corruption_timestep();
    let (a, b, c) = (at(0.5), at(0.6), at(1.0));
    let mut state = AdaptiveCorruptionState::new(1000, 0.05, 0.5).unwrap();
    for _ in 0..100 {
        state = state.update_ema(0.9).unwrap();
    }
    let gap = (state.acc_ema - 0.9).abs();
    (
        (a, b, c) == (0, 200, 1000) && gap <= 0.01,
        format!("s = {a}/{b}/{c}; |ema - 0.9| after 100 updates = {gap:.4}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = seeded(4);
    let mut identities = true;
    for _ in 0..100 {
        let z0 = LatentTensor::<f64>::randn([2, 3, 4, 4], &mut rng);
        let hat = LatentTensor::<f64>::randn([2, 3, 4, 4], &mut rng);
        let l_d = rng.random_range(0.0..5.0);
        let r = generator_loss(&z0, &hat, l_d, DEFAULT_LAMBDA_ADV).unwrap();
        identities &= r.l_adv == -r.l_d && r.l_g == r.l_mse + 1e-3 * r.l_adv;
    }
    let bce = discriminator_loss(&[0.5f64, 0.5], &[true, false]).unwrap();
    let bce_err = (bce - std::f64::consts::LN_2).abs();

    // gradient of L_mse with respect to generator weights
    let gen = Generator::<f64>::new(tiny_generator(), 3, 100, &mut seeded(40)).unwrap();
    let z_t = LatentTensor::<f64>::randn([2, 3, 8, 8], &mut rng);
    let z_low = LatentTensor::<f64>::randn([2, 3, 8, 8], &mut rng);
    let z0 = LatentTensor::<f64>::randn([2, 3, 8, 8], &mut rng);
    let t = [17usize, 83];
    let loss_of = |g: &Generator<f64>| -> f64 {
        let mut graph = Graph::new();
        let p = g.params().bind(&mut graph, false);
        let a = graph.constant(z_t.to_dyn());
        let b = graph.constant(z_low.to_dyn());
        let out = g.forward_graph(&mut graph, &p, a, &t, b).unwrap();
        let target = graph.constant(z0.to_dyn());
        let m = graph.mse(out, target);
        graph.scalar(m)
    };
    let mut graph = Graph::new();
    let p = gen.params().bind(&mut graph, true);
    let a = graph.constant(z_t.to_dyn());
    let b = graph.constant(z_low.to_dyn());
    let out = gen.forward_graph(&mut graph, &p, a, &t, b).unwrap();
    let target = graph.constant(z0.to_dyn());
    let m = graph.mse(out, target);
    let mut grads = graph.backward(m);
    let analytic: Vec<Option<ArrayD<f64>>> = p.collect(&mut grads);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let h = 1e-3;
    for (ti, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let flat = grad.as_slice().unwrap();
        let j = flat
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .map(|(j, _)| j)
            .unwrap();
        if flat[j].abs() < 1e-8 {
            continue;
        }
        let shifted = |d: f64| {
            let mut g2 = gen.clone();
            let v = &mut g2.params_mut().values_mut()[ti];
            v.as_slice_mut().unwrap()[j] += d;
            loss_of(&g2)
        };
        // fourth-order central stencil
        let numeric = (-shifted(2.0 * h) + 8.0 * shifted(h) - 8.0 * shifted(-h) + shifted(-2.0 * h)) / (12.0 * h);
        worst = worst.max((flat[j] - numeric).abs() / numeric.abs().max(flat[j].abs()));
        checked += 1;
    }
    (
        identities && bce_err <= 1e-9 && worst <= 1e-5 && checked > 0,
        format!(
            "identities exact: {identities}; |BCE(0.5) - ln 2| = {bce_err:.1e}; finite differences over {checked} weights: worst rel err {worst:.2e}"
        ),
    )
}

struct Toy {
    full: Checkpoint<f32>,
    ablation: Checkpoint<f32>,
    test: Vec<PairedSample<f32>>,
    note: String,
}

fn toy_config(lambda_adv: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: TOY_LR,
        total_steps: TOY_STEPS,
        lambda_adv,
        seed: 5,
        checkpoint_every: 1000,
        ..TrainConfig::toy()
    }
}

fn cached_train(config: TrainConfig) -> (Checkpoint<f32>, String) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("toy-{}-{}.ckpt", config.hash(), TOY_TRAIN_IMAGES));
    let retrain = std::env::var("SUPRES_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    if !retrain {
        if let Ok(ck) = Checkpoint::<f32>::load(&path) {
            return (ck, format!("cached {}", path.display()));
        }
    }
    let mut data = PairedDataset::<f32>::synthetic(TOY_TRAIN_IMAGES, TOY_PATCH, 4, 11).unwrap();
    let run = dir.join(format!("run-{}", config.hash()));
    std::fs::create_dir_all(&run).unwrap();
    let start = Instant::now();
    let ck = train(&mut data, config, Some(&run)).unwrap();
    ck.save(&path).unwrap();
    (ck, format!("trained in {:.0}s", start.elapsed().as_secs_f64()))
}

fn toy() -> Toy {
    let (full, a) = cached_train(toy_config(DEFAULT_LAMBDA_ADV));
    let (ablation, b) = cached_train(toy_config(0.0));
    let test = PairedDataset::<f32>::synthetic(TOY_TEST_IMAGES, TOY_PATCH, 4, 999).unwrap().all(5).unwrap();
    Toy {
        full,
        ablation,
        test,
        note: format!("full: {a}; ablation: {b}"),
    }
}

fn settings(plugin: &PyramidMse) -> BenchSettings<'_> {
    BenchSettings {
        model_id: "toy".into(),
        dataset_id: "synthetic-heldout".into(),
        batch_size: 8,
        seed: 9,
        perceptual: Some(plugin),
    }
}

fn criterion_5(toy: &Toy) -> Outcome {
    let plugin = PyramidMse::default();
    let ten = [SamplerConfig::new(SamplingMethod::Deterministic, 10)];
    let run = |ck: &Checkpoint<f32>| {
        let schedule = ck.schedule().unwrap();
        let p = SrPipeline {
            generator: &ck.generator,
            codec: &ck.codec,
            schedule: &schedule,
        };
        benchmark(&p, &toy.test, &ten, &settings(&plugin)).unwrap()
    };
    let full = run(&toy.full);
    let ablation = run(&toy.ablation);
    let (bic, model) = (&full[0], &full[1]);
    let gain = model.psnr - bic.psnr;
    let (pf, pa) = (model.perceptual.unwrap(), ablation[1].perceptual.unwrap());
    (
        gain >= 0.5 && pf < pa,
        format!(
            "{} steps: bicubic {:.3} dB, model {:.3} dB (gain {gain:+.3}); perceptual full {pf:.6} vs lambda_adv=0 {pa:.6} ({})",
            TOY_STEPS, bic.psnr, model.psnr, toy.note
        ),
    )
}

fn criterion_6(toy: &Toy) -> Outcome {
    let plugin = PyramidMse::default();
    let ck = &toy.full;
    let schedule = ck.schedule().unwrap();
    let p = SrPipeline {
        generator: &ck.generator,
        codec: &ck.codec,
        schedule: &schedule,
    };
    let rows = step_sweep(
        &p,
        &toy.test,
        &[3, 50],
        &[SamplingMethod::Ancestral, SamplingMethod::Deterministic],
        &settings(&plugin),
    )
    .unwrap();
    let (ddpm3, ddpm50, ddim3, ddim50) = (rows[0].mse, rows[1].mse, rows[2].mse, rows[3].mse);
    let within = (ddim3 - ddim50).abs() <= 0.25 * ddim50 && (ddpm3 - ddpm50).abs() <= 0.25 * ddpm50;
    let (gap3, gap50) = ((ddpm3 - ddim3).abs(), (ddpm50 - ddim50).abs());
    (
        within && gap50 <= gap3,
        format!("mse ddim 3/50 = {ddim3:.6}/{ddim50:.6}, ddpm 3/50 = {ddpm3:.6}/{ddpm50:.6}; ddpm-ddim gap 3 = {gap3:.2e}, 50 = {gap50:.2e}"),
    )
}

fn criterion_7(toy: &Toy) -> Outcome {
    let ck = &toy.full;
    let schedule = ck.schedule().unwrap();
    let batch = stack(toy.test[..8].to_vec()).unwrap();
    let z_low = ck.codec.encode(&batch.x_low).unwrap();
    let steps = [1usize, 5, 10, 50, 100];
    let mut times = Vec::new();
    sample(&ck.generator, &z_low, &schedule, &SamplerConfig::new(SamplingMethod::Deterministic, 2), 0).unwrap();
    for &n in &steps {
        let cfg = SamplerConfig::new(SamplingMethod::Deterministic, n);
        let mut best = f64::INFINITY;
        for rep in 0..3 {
            let start = Instant::now();
            sample(&ck.generator, &z_low, &schedule, &cfg, rep).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
        }
        times.push(best);
    }
    let xs: Vec<f64> = steps.iter().map(|&n| n as f64).collect();
    let r2 = linear_fit_r2(&xs, &times);
    let ratio = times[1] / times[4];
    (
        r2 >= 0.99 && ratio <= 1.0 / 15.0,
        format!(
            "seconds at {steps:?} = [{}]; R^2 = {r2:.5}; t(5)/t(100) = {ratio:.4}",
            times.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    // DDIM eta = 0 bit identity
    let gen = Generator::<f32>::new(GeneratorConfig::toy(), 3, 1000, &mut seeded(8)).unwrap();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let z_low = LatentTensor::<f32>::randn([2, 3, 32, 32], &mut seeded(80));
    let cfg = SamplerConfig::new(SamplingMethod::Deterministic, 10);
    let a = sample(&gen, &z_low, &schedule, &cfg, 123).unwrap();
    let b = sample(&gen, &z_low, &schedule, &cfg, 123).unwrap();
    let identical = a.0.iter().zip(b.0.iter()).all(|(x, y)| x.to_bits() == y.to_bits());

    // resume at step 50 of 100
    let dir = tempfile::tempdir().unwrap();
    let (full_dir, part_dir) = (dir.path().join("full"), dir.path().join("part"));
    std::fs::create_dir_all(&full_dir).unwrap();
    std::fs::create_dir_all(&part_dir).unwrap();
    let config = TrainConfig {
        total_steps: 100,
        checkpoint_every: 25,
        ..small_config(8)
    };
    let data = || PairedDataset::<f64>::synthetic(64, 32, 4, 8).unwrap();
    let full = train(&mut data(), config.clone(), Some(&full_dir)).unwrap();
    let half = TrainConfig {
        total_steps: 50,
        ..config.clone()
    };
    train(&mut data(), half, Some(&part_dir)).unwrap();
    let mut resumed = Checkpoint::<f64>::load(&part_dir.join("final.ckpt")).unwrap();
    resumed.config.total_steps = 100;
    resumed.train_until(&mut data(), Some(&part_dir), |_, _, _| {}).unwrap();
    let sa = std::fs::read_to_string(full_dir.join("loss.csv")).unwrap();
    let sb = std::fs::read_to_string(part_dir.join("loss.csv")).unwrap();
    let same_weights = resumed.generator.params().content_hash() == full.generator.params().content_hash()
        && resumed.discriminator.params().content_hash() == full.discriminator.params().content_hash();
    (
        identical && sa == sb && sa.lines().count() == 101 && same_weights,
        format!(
            "ddim eta=0 bit-identical: {identical}; resumed loss stream identical: {} ({} rows); final weights identical: {same_weights}",
            sa == sb,
            sa.lines().count() - 1
        ),
    )
}

fn criterion_9() -> Outcome {
    let config = TrainConfig {
        trace: true,
        total_steps: 500,
        acc_ema_init: 0.7,
        autoencoder: AutoencoderSpec {
            width: 8,
            pretrain_steps: 20,
            pretrain_batch: 4,
            ..AutoencoderSpec::conv_vae()
        },
        ..small_config(9)
    };
    let mut data = PairedDataset::<f64>::synthetic(64, 32, 4, 9).unwrap();
    let mut ck = Checkpoint::<f64>::init_with_data(config, &mut data).unwrap();
    let codec0 = ck.codec.content_hash();
    let schedule = ck.schedule().unwrap();
    let mut violations = 0;
    let (mut g_moved, mut max_s) = (0, 0);
    for step in 0..500 {
        let batch = data.batch(step, 4).unwrap();
        let g_start = ck.generator.params().content_hash();
        let (report, trace) = ck.train_step(&batch, &schedule).unwrap();
        let h = trace.unwrap().hashes;
        if h.generator_before_d != g_start
            || h.generator_after_d != h.generator_before_d
            || h.discriminator_after_g != h.discriminator_before_g
            || h.codec_before != codec0
            || h.codec_after != codec0
        {
            violations += 1;
        }
        g_moved += usize::from(ck.generator.params().content_hash() != g_start);
        max_s = max_s.max(report.s_used);
    }
    let codec_same = ck.codec.content_hash() == codec0;
    (
        violations == 0 && codec_same && g_moved == 500,
        format!("500 steps, conv_vae codec: isolation violations {violations}, codec unchanged {codec_same}, generator updated on {g_moved} steps, max s {max_s}"),
    )
}

fn criterion_10() -> Outcome {
    let unit = |shape: [usize; 4], v: Vec<f64>| ImageTensor::from_shape_vec(shape, v.into_iter().map(|x| 2.0 * x - 1.0).collect()).unwrap();
    let psnr = eval::psnr_from_mse(0.01);
    let x = ImageTensor::<f64>::randn([2, 3, 24, 24], &mut seeded(10)).clamp_unit();
    let ssim = eval::ssim(&x, &x).unwrap();
    let m1 = eval::mse(&unit([1, 1, 1, 2], vec![0.0, 0.5]), &unit([1, 1, 1, 2], vec![0.5, 0.5])).unwrap();
    let m2 = eval::mse(&unit([1, 3, 4, 4], vec![0.0; 48]), &unit([1, 3, 4, 4], vec![1.0; 48])).unwrap();
    let ok = (psnr - 20.0).abs() <= 1e-9 && (ssim - 1.0).abs() <= 1e-9 && (m1 - 0.125).abs() <= 1e-9 && (m2 - 1.0).abs() <= 1e-9;
    (ok, format!("psnr(0.01) = {psnr}, ssim(x,x) = {ssim}, mse cases = {m1}, {m2}"))
}

fn vae_round_trip() -> Outcome {
    let spec = AutoencoderSpec::conv_vae();
    let mut codec = Codec::<f32>::from_spec(&spec, &mut seeded(12)).unwrap();
    let mut data = PairedDataset::<f32>::synthetic(2000, spec.pretrain_patch, 4, 13).unwrap();
    let start = Instant::now();
    codec.pretrain(&mut data, 14).unwrap();
    let test = PairedDataset::<f32>::synthetic(32, 64, 4, 999).unwrap().all(5).unwrap();
    let x = stack(test).unwrap().x0;
    let back = codec.decode(&codec.encode(&x).unwrap()).unwrap();
    let psnr = eval::psnr(&x, &back).unwrap();
    (
        psnr >= 25.0,
        format!("held-out 64x64 round trip {psnr:.2} dB after {} pre-training steps ({:.0}s)", spec.pretrain_steps, start.elapsed().as_secs_f64()),
    )
}

fn report(label: &str, f: impl FnOnce() -> Outcome, failures: &mut Vec<String>) {
    let start = Instant::now();
    let (ok, detail) = f();
    let secs = start.elapsed().as_secs_f64();
    println!("{label}: {} [{secs:.1}s] {detail}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        failures.push(label.to_string());
    }
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |label: &str| filter.as_deref().is_none_or(|f| label.contains(f));
    let mut failures = Vec::new();
    let timed = |limit: f64, f: fn() -> Outcome| {
        move || {
            let start = Instant::now();
            let (ok, detail) = f();
            let secs = start.elapsed().as_secs_f64();
            (ok && secs < limit, format!("{detail}; runtime {secs:.1}s (limit {limit}s)"))
        }
    };
    if wanted("criterion 1") {
        report("criterion 1 (schedule oracle)", timed(5.0, criterion_1), &mut failures);
    }
    if wanted("criterion 2") {
        report("criterion 2 (forward marginal)", timed(30.0, criterion_2), &mut failures);
    }
    if wanted("criterion 3") {
        report("criterion 3 (controller formulas)", criterion_3, &mut failures);
    }
    if wanted("criterion 4") {
        report("criterion 4 (loss identities)", criterion_4, &mut failures);
    }
    if wanted("criterion 5") || wanted("criterion 6") || wanted("criterion 7") {
        let toy = toy();
        if wanted("criterion 5") {
            report("criterion 5 (toy end-to-end)", || criterion_5(&toy), &mut failures);
        }
        if wanted("criterion 6") {
            report("criterion 6 (few-step robustness)", || criterion_6(&toy), &mut failures);
        }
        if wanted("criterion 7") {
            report("criterion 7 (inference cost linearity)", || criterion_7(&toy), &mut failures);
        }
    }
    if wanted("criterion 8") {
        report("criterion 8 (determinism and resume)", criterion_8, &mut failures);
    }
    if wanted("criterion 9") {
        report("criterion 9 (frozen codec, update isolation)", criterion_9, &mut failures);
    }
    if wanted("criterion 10") {
        report("criterion 10 (metric golden values)", criterion_10, &mut failures);
    }
    if wanted("vae") {
        report("vae round trip (>= 25 dB)", vae_round_trip, &mut failures);
    }
    if failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: FAILED {}", failures.join(", "));
        std::process::exit(1);
    }
}
