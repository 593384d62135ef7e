mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use supres_core::data::{bicubic_resize, load_image, save_png, PairedDataset, PairedSample};
use supres_core::eval::{benchmark, step_sweep, write_csv, write_json, BenchSettings, MetricsReport, PyramidMse, SrPipeline};
use supres_core::trainer::{checkpoint_dtype, train, Checkpoint, Precision};
use supres_core::{Error, Scalar};

use config::{Overrides, PerceptualChoice, Role, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "supres", version, about = "Latent diffusion-GAN super-resolution")]
struct Cli {
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, global = true, env = "SUPRES_DEVICE", default_value = "cpu")]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus the loss stream.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint inside its run directory, up to the
        /// configured total steps.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Super-resolve images with a trained checkpoint.
    Upscale {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to a fresh run directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Benchmark the configured sampler against the bicubic baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a grid of step counts for each sampling method.
    SweepSteps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated step counts [eval.steps].
        #[arg(long, value_delimiter = ',')]
        steps_list: Option<Vec<usize>>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::DegenerateSchedule(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!("device '{}' is not available; this build runs on cpu only", cli.device)));
    }
    match cli.command {
        Command::Train { config, resume, overrides } => {
            let cfg = prepare(config.as_deref(), &overrides, Role::Train)?;
            if let Some(path) = resume {
                return with_checkpoint(&path, |ck| match ck {
                    AnyCheckpoint::F32(ck) => cmd_resume(&cfg, ck, &path),
                    AnyCheckpoint::F64(ck) => cmd_resume(&cfg, ck, &path),
                });
            }
            match cfg.train.precision {
                Precision::F32 => cmd_train::<f32>(&cfg),
                Precision::F64 => cmd_train::<f64>(&cfg),
            }
        }
        Command::Upscale {
            checkpoint,
            output,
            config,
            overrides,
            inputs,
        } => {
            let cfg = prepare(config.as_deref(), &overrides, Role::Infer)?;
            with_checkpoint(&checkpoint, |ck: AnyCheckpoint| match ck {
                AnyCheckpoint::F32(ck) => cmd_upscale(&cfg, &ck, &inputs, output.as_deref()),
                AnyCheckpoint::F64(ck) => cmd_upscale(&cfg, &ck, &inputs, output.as_deref()),
            })
        }
        Command::Evaluate {
            checkpoint,
            config,
            overrides,
        } => {
            let cfg = prepare(config.as_deref(), &overrides, Role::Infer)?;
            with_checkpoint(&checkpoint, |ck| match ck {
                AnyCheckpoint::F32(ck) => cmd_evaluate(&cfg, &ck, &checkpoint, false),
                AnyCheckpoint::F64(ck) => cmd_evaluate(&cfg, &ck, &checkpoint, false),
            })
        }
        Command::SweepSteps {
            checkpoint,
            config,
            steps_list,
            overrides,
        } => {
            let mut cfg = prepare(config.as_deref(), &overrides, Role::Infer)?;
            if let Some(steps) = steps_list {
                cfg.eval.steps = steps;
            }
            with_checkpoint(&checkpoint, |ck| match ck {
                AnyCheckpoint::F32(ck) => cmd_evaluate(&cfg, &ck, &checkpoint, true),
                AnyCheckpoint::F64(ck) => cmd_evaluate(&cfg, &ck, &checkpoint, true),
            })
        }
    }
}

fn prepare(path: Option<&Path>, overrides: &Overrides, role: Role) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg, role)?;
    Ok(cfg)
}

enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn with_checkpoint(path: &Path, f: impl FnOnce(AnyCheckpoint) -> Result<(), Error>) -> Result<(), Error> {
    let ck = match checkpoint_dtype(path)?.as_str() {
        "f32" => AnyCheckpoint::F32(Checkpoint::load(path)?),
        "f64" => AnyCheckpoint::F64(Checkpoint::load(path)?),
        other => return Err(Error::Format(format!("{}: unknown weight type {other}", path.display()))),
    };
    f(ck)
}

fn dataset<S: Scalar>(cfg: &RunConfig, role: Role) -> Result<PairedDataset<S>, Error> {
    let d = &cfg.data;
    let (count, seed) = match role {
        Role::Train => (d.synthetic, d.seed),
        Role::Infer => (d.test_synthetic, d.test_seed),
    };
    match &d.dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
            }
            PairedDataset::from_dir(dir, d.patch, d.scale, seed)
        }
        None => PairedDataset::synthetic(count, d.patch, d.scale, seed),
    }
}

fn cmd_train<S: Scalar>(cfg: &RunConfig) -> Result<(), Error> {
    cfg.train.validate()?;
    cfg.train.check_patch(cfg.data.patch)?;
    let mut data = dataset::<S>(cfg, Role::Train)?;
    let dir = cfg.create_run_dir(None)?;
    log::info!(
        "training {} steps on {} images ({}x{} patches, x{}), run directory {}",
        cfg.train.total_steps,
        data.len(),
        cfg.data.patch,
        cfg.data.patch,
        cfg.data.scale,
        dir.display()
    );
    let start = Instant::now();
    let ck = train(&mut data, cfg.train.clone(), Some(&dir))?;
    println!(
        "trained {} steps in {:.1}s; final checkpoint {}",
        ck.step,
        start.elapsed().as_secs_f64(),
        dir.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_resume<S: Scalar>(cfg: &RunConfig, mut ck: Checkpoint<S>, path: &Path) -> Result<(), Error> {
    let total = cfg.train.total_steps;
    if total <= ck.step {
        return Err(Error::Config(format!(
            "{} is already at step {}; set train.total_steps (or --steps) above it to resume",
            path.display(),
            ck.step
        )));
    }
    ck.config.total_steps = total;
    ck.config.check_patch(cfg.data.patch)?;
    let mut data = dataset::<S>(cfg, Role::Train)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    log::info!("resuming {} from step {} to {total}", path.display(), ck.step);
    let start = Instant::now();
    ck.train_until(&mut data, Some(&dir), |_, _, _| {})?;
    println!(
        "trained {} steps in {:.1}s; final checkpoint {}",
        ck.step,
        start.elapsed().as_secs_f64(),
        dir.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_upscale<S: Scalar>(cfg: &RunConfig, ck: &Checkpoint<S>, inputs: &[PathBuf], output: Option<&Path>) -> Result<(), Error> {
    let schedule = ck.schedule()?;
    cfg.sampler.validate(schedule.timesteps())?;
    let multiple = ck.codec.spatial_factor() * ck.generator.config().spatial_multiple();
    let out_dir = match output {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::Config(format!("cannot create {}: {e}", d.display())))?;
            d.to_path_buf()
        }
        None => cfg.create_run_dir(None)?,
    };
    let pipeline = SrPipeline {
        generator: &ck.generator,
        codec: &ck.codec,
        schedule: &schedule,
    };
    log::info!("sampling with {} in {} steps", cfg.sampler.method, cfg.sampler.num_steps);
    for (i, input) in inputs.iter().enumerate() {
        let mut img = load_image::<S>(input)?;
        if cfg.eval.upsample_input {
            let [_, _, h, w] = img.shape();
            img = bicubic_resize(&img, h * cfg.data.scale, w * cfg.data.scale)?.clamp_unit();
        }
        let [_, _, h, w] = img.shape();
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Argument(format!(
                "{}: {w}x{h} canvas must have sides divisible by {multiple}",
                input.display()
            )));
        }
        let start = Instant::now();
        let out = pipeline.upscale(&img, &cfg.sampler, cfg.eval.seed.wrapping_add(i as u64))?;
        let secs = start.elapsed().as_secs_f64();
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = out_dir.join(format!("{stem}_sr.png"));
        save_png(&out, 0, &path)?;
        println!(
            "{} -> {} ({w}x{h}, {} {} steps, {secs:.3}s)",
            input.display(),
            path.display(),
            cfg.sampler.method,
            cfg.sampler.num_steps
        );
    }
    Ok(())
}

fn cmd_evaluate<S: Scalar>(cfg: &RunConfig, ck: &Checkpoint<S>, ck_path: &Path, sweep: bool) -> Result<(), Error> {
    let schedule = ck.schedule()?;
    if sweep {
        if cfg.eval.steps.is_empty() || cfg.eval.methods.is_empty() {
            return Err(Error::Config("sweep needs at least one step count and one method".into()));
        }
        if let Some(bad) = cfg.eval.steps.iter().find(|&&n| n == 0 || n > schedule.timesteps()) {
            return Err(Error::Argument(format!("step count {bad} outside 1..={}", schedule.timesteps())));
        }
    } else {
        cfg.sampler.validate(schedule.timesteps())?;
    }
    ck.config.check_patch(cfg.data.patch)?;
    let data = dataset::<S>(cfg, Role::Infer)?;
    let samples: Vec<PairedSample<S>> = data.all(cfg.data.test_seed)?;
    let plugin = PyramidMse::default();
    let settings = BenchSettings {
        model_id: format!(
            "{}@{}",
            ck_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model"),
            ck.step
        ),
        dataset_id: match &cfg.data.dir {
            Some(d) => d.display().to_string(),
            None => format!("synthetic:{}:{}", cfg.data.test_seed, data.len()),
        },
        batch_size: cfg.eval.batch_size,
        seed: cfg.eval.seed,
        perceptual: match cfg.eval.perceptual {
            PerceptualChoice::Pyramid => Some(&plugin),
            PerceptualChoice::None => None,
        },
    };
    let pipeline = SrPipeline {
        generator: &ck.generator,
        codec: &ck.codec,
        schedule: &schedule,
    };
    let dir = cfg.create_run_dir(cfg.eval.report_dir.as_deref())?;
    let (rows, name) = if sweep {
        (step_sweep(&pipeline, &samples, &cfg.eval.steps, &cfg.eval.methods, &settings)?, "sweep")
    } else {
        (benchmark(&pipeline, &samples, std::slice::from_ref(&cfg.sampler), &settings)?, "metrics")
    };
    write_csv(&rows, &dir.join(format!("{name}.csv")))?;
    write_json(&rows, &dir.join(format!("{name}.json")))?;
    print_table(&rows);
    println!("tables written to {}", dir.display());
    Ok(())
}

fn print_table(rows: &[MetricsReport]) {
    println!(
        "{:<10} {:>6} {:>9} {:>8} {:>10} {:>11} {:>10}",
        "method", "steps", "psnr", "ssim", "mse", "perceptual", "s/batch"
    );
    for r in rows {
        println!(
            "{:<10} {:>6} {:>9.3} {:>8.4} {:>10.6} {:>11} {:>10.4}",
            r.method,
            r.steps,
            r.psnr,
            r.ssim,
            r.mse,
            r.perceptual.map(|p| format!("{p:.6}")).unwrap_or_else(|| "-".into()),
            r.time_per_batch
        );
    }
}
