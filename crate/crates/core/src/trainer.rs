//! The alternating discriminator/generator training loop, checkpoints and
//! the loss stream.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{
    batch_accuracy, combine, concat_in_order, discriminator_loss, draw_order, draw_pair_noise, labels,
    AdaptiveCorruptionState, LossReport, BCE_EPS, DEFAULT_LAMBDA_ADV, DEFAULT_LAMBDA_EMA,
};
use crate::autoencoder::{load_into, AutoencoderSpec, Codec, IMAGE_CHANNELS};
use crate::data::{Batch, PairedDataset};
use crate::diffusion::{forward_diffuse, forward_diffuse_batch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{Adam, ParamStore};
use crate::rng::derive;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{ImageTensor, LatentTensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SRDGCKPT";

// rng stream salts, kept apart from the dataset's streams
const STEP_SALT: u64 = 0x5eed_0001;
const GENERATOR_SALT: u64 = 0x5eed_0002;
const DISCRIMINATOR_SALT: u64 = 0x5eed_0003;
const CODEC_SALT: u64 = 0x5eed_0004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Falls back to `learning_rate`.
    pub discriminator_learning_rate: Option<f64>,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lambda_adv: f64,
    pub lambda_ema: f64,
    /// Starting value of the accuracy EMA; 0.5 means no corruption.
    pub acc_ema_init: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Record symbol shapes and parameter hashes every step.
    pub trace: bool,
    pub schedule: ScheduleSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub autoencoder: AutoencoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            discriminator_learning_rate: None,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            total_steps: 2000,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            lambda_ema: DEFAULT_LAMBDA_EMA,
            acc_ema_init: 0.5,
            seed: 0,
            checkpoint_every: 500,
            precision: Precision::F32,
            trace: false,
            schedule: ScheduleSpec::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            autoencoder: AutoencoderSpec::identity(),
        }
    }
}

impl TrainConfig {
    /// The scaled-down configuration used for CPU experiments.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            ..Self::default()
        }
    }

    pub fn discriminator_lr(&self) -> f64 {
        self.discriminator_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.discriminator_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("discriminator_learning_rate must be non-negative, got {lr}"));
            }
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return bad(format!("lambda_adv must be non-negative, got {}", self.lambda_adv));
        }
        AdaptiveCorruptionState::new(self.schedule.timesteps, self.lambda_ema, self.acc_ema_init)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.generator.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.autoencoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.discriminator.widths.is_empty() {
            return bad("discriminator needs at least one stage".into());
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// Patch sides the networks accept: a multiple of the codec factor
    /// times the generator's multiple, at least the discriminator minimum.
    pub fn check_patch(&self, patch: usize) -> Result<()> {
        let f = self.autoencoder.spatial_factor();
        let multiple = f * self.generator.spatial_multiple();
        let min = (1usize << self.discriminator.widths.len()).max(multiple);
        if patch % multiple != 0 || patch < min {
            return Err(Error::Config(format!(
                "patch {patch} must be a multiple of {multiple} (codec factor {f} times generator multiple {}) and at least {min}",
                self.generator.spatial_multiple()
            )));
        }
        Ok(())
    }
}

/// Hashes taken around the two updates of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationHashes {
    pub generator_before_d: String,
    pub generator_after_d: String,
    pub discriminator_before_g: String,
    pub discriminator_after_g: String,
    pub codec_before: String,
    pub codec_after: String,
}

/// Shapes of every intermediate symbol of one step, in order:
/// t, s, z_t, ẑ_0, z_s, ẑ_s, x_s, x̂_s.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: Vec<usize>,
    pub s: usize,
    pub shapes: Vec<(&'static str, Vec<usize>)>,
    pub hashes: IsolationHashes,
}

/// Everything needed to continue training or to run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub config: TrainConfig,
    pub step: u64,
    pub state: AdaptiveCorruptionState,
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    pub codec: Codec<S>,
    pub opt_g: Adam<S>,
    pub opt_d: Adam<S>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Fresh weights for `config` around an already prepared codec.
    pub fn init(config: TrainConfig, codec: Codec<S>) -> Result<Self> {
        config.validate()?;
        if codec.spec() != config.autoencoder && codec.kind() != crate::autoencoder::CodecKind::Identity {
            return Err(Error::Config("codec does not match the autoencoder spec".into()));
        }
        let t = config.schedule.timesteps;
        let generator = Generator::new(
            config.generator.clone(),
            codec.latent_channels(),
            t,
            &mut derive(config.seed, GENERATOR_SALT),
        )?;
        let discriminator = Discriminator::new(
            config.discriminator.clone(),
            IMAGE_CHANNELS,
            &mut derive(config.seed, DISCRIMINATOR_SALT),
        )?;
        let opt_g = Adam::new(generator.params(), config.learning_rate, config.beta1, config.beta2);
        let opt_d = Adam::new(discriminator.params(), config.discriminator_lr(), config.beta1, config.beta2);
        let state = AdaptiveCorruptionState::new(t, config.lambda_ema, config.acc_ema_init)?;
        Ok(Self {
            config,
            step: 0,
            state,
            generator,
            discriminator,
            codec,
            opt_g,
            opt_d,
        })
    }

    /// Builds the codec from the config (pre-training it on `data` when it
    /// has weights) and initializes the networks.
    pub fn init_with_data(config: TrainConfig, data: &mut PairedDataset<S>) -> Result<Self> {
        config.validate()?;
        let mut codec = Codec::from_spec(&config.autoencoder, &mut derive(config.seed, CODEC_SALT))?;
        let losses = codec.pretrain(data, config.seed ^ CODEC_SALT)?;
        if let Some(last) = losses.last() {
            log::info!("autoencoder pre-trained for {} steps, final loss {last:.5}", losses.len());
        }
        Self::init(config, codec)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    fn groups(&self) -> Vec<(&'static str, Vec<(String, &ndarray::ArrayD<S>)>)> {
        fn named<S: Scalar>(store: &ParamStore<S>) -> Vec<(String, &ndarray::ArrayD<S>)> {
            moments(store, store.values())
        }
        fn moments<'a, S: Scalar>(store: &ParamStore<S>, m: &'a [ndarray::ArrayD<S>]) -> Vec<(String, &'a ndarray::ArrayD<S>)> {
            store.names().iter().cloned().zip(m.iter()).collect()
        }
        let g = self.generator.params();
        let d = self.discriminator.params();
        let mut out = vec![
            ("generator", named(g)),
            ("generator.adam_m", moments(g, &self.opt_g.m)),
            ("generator.adam_v", moments(g, &self.opt_g.v)),
            ("discriminator", named(d)),
            ("discriminator.adam_m", moments(d, &self.opt_d.m)),
            ("discriminator.adam_v", moments(d, &self.opt_d.v)),
        ];
        out.push(("autoencoder", self.codec.params().map(named).unwrap_or_default()));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let groups = self.groups();
        let mut blob = Vec::new();
        let index: Vec<GroupHeader> = groups
            .iter()
            .map(|(name, tensors)| GroupHeader {
                name: name.to_string(),
                tensors: tensors
                    .iter()
                    .map(|(n, v)| {
                        v.iter().for_each(|x| x.write_le(&mut blob));
                        TensorHeader {
                            name: n.clone(),
                            shape: v.shape().to_vec(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let header = Header {
            dtype: S::DTYPE.to_string(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            step: self.step,
            state: self.state,
            opt_g: OptHeader::of(&self.opt_g),
            opt_d: OptHeader::of(&self.opt_d),
            groups: index,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(blob.len() + json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut blob) = parse_header(bytes)?;
        if header.dtype != S::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} weights, {} requested",
                header.dtype,
                S::DTYPE
            )));
        }
        let config = header.config.clone();
        config.validate().map_err(|e| Error::Format(format!("embedded config is invalid: {e}")))?;
        if config.hash() != header.config_hash {
            return Err(Error::Format("config hash does not match the embedded config".into()));
        }
        let codec = Codec::from_spec(&config.autoencoder, &mut derive(0, 0))?;
        let mut ck = Self::init(config, codec)?;
        ck.step = header.step;
        ck.state = header.state;
        header.opt_g.apply(&mut ck.opt_g);
        header.opt_d.apply(&mut ck.opt_d);

        let expected: Vec<(&'static str, Vec<(String, Vec<usize>)>)> = ck
            .groups()
            .into_iter()
            .map(|(n, ts)| (n, ts.into_iter().map(|(name, v)| (name, v.shape().to_vec())).collect()))
            .collect();
        if expected.len() != header.groups.len() {
            return Err(Error::Format("tensor group count mismatch".into()));
        }
        let mut loaded: Vec<Vec<ndarray::ArrayD<S>>> = Vec::new();
        for ((name, tensors), gh) in expected.iter().zip(&header.groups) {
            if *name != gh.name || tensors.len() != gh.tensors.len() {
                return Err(Error::Format(format!("tensor group {} does not match the architecture", gh.name)));
            }
            let mut group = Vec::with_capacity(tensors.len());
            for ((tname, shape), th) in tensors.iter().zip(&gh.tensors) {
                if *tname != th.name || *shape != th.shape {
                    return Err(Error::Format(format!(
                        "tensor {}/{} {:?} does not match the architecture ({tname} {shape:?})",
                        gh.name, th.name, th.shape
                    )));
                }
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    let (v, rest) = S::read_le(blob).ok_or_else(|| Error::Format("tensor data truncated".into()))?;
                    data.push(v);
                    blob = rest;
                }
                group.push(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("size checked"));
            }
            loaded.push(group);
        }
        if !blob.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor data", blob.len())));
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("group count checked");
        load_into(ck.generator.params_mut(), next())?;
        ck.opt_g.m = next();
        ck.opt_g.v = next();
        load_into(ck.discriminator.params_mut(), next())?;
        ck.opt_d.m = next();
        ck.opt_d.v = next();
        ck.codec.load_params(next())?;
        Ok(ck)
    }

    /// Written to a temporary sibling first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Runs one alternating update on `batch` and advances the step counter.
    pub fn train_step(&mut self, batch: &Batch<S>, schedule: &NoiseSchedule) -> Result<(LossReport, Option<StepTrace>)> {
        let (report, trace) = step(self, batch, schedule)?;
        self.step += 1;
        Ok((report, trace))
    }

    /// Trains from the current step up to `config.total_steps`, calling
    /// `on_step` with each report. Checkpoints go to `run_dir` when given.
    pub fn train_until(
        &mut self,
        data: &mut PairedDataset<S>,
        run_dir: Option<&Path>,
        mut on_step: impl FnMut(u64, &LossReport, &AdaptiveCorruptionState),
    ) -> Result<()> {
        self.config.check_patch(data.patch())?;
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let schedule = self.schedule()?;
        let mut log = run_dir.map(|d| LossLog::open(&d.join("loss.csv"), self.step)).transpose()?;
        while self.step < self.config.total_steps {
            let batch = data.batch(self.step, self.config.batch_size)?;
            let index = self.step;
            let (report, _) = self.train_step(&batch, &schedule)?;
            if let Some(log) = log.as_mut() {
                log.write(index, &report, &self.state)?;
            }
            on_step(index, &report, &self.state);
            if let Some(dir) = run_dir {
                if self.step % self.config.checkpoint_every == 0 && self.step < self.config.total_steps {
                    self.save(&dir.join(format!("checkpoint_{:07}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Initializes from `config` and trains to `config.total_steps`.
pub fn train<S: Scalar>(data: &mut PairedDataset<S>, config: TrainConfig, run_dir: Option<&Path>) -> Result<Checkpoint<S>> {
    config.check_patch(data.patch())?;
    let mut ck = Checkpoint::init_with_data(config, data)?;
    ck.train_until(data, run_dir, |step, r, state| {
        if step % 50 == 0 {
            log::info!(
                "step {step}: l_mse {:.5} l_d {:.4} acc {:.3} acc_ema {:.3} s {}",
                r.l_mse,
                r.l_d,
                r.acc_batch,
                state.acc_ema,
                r.s_used
            );
        }
    })?;
    Ok(ck)
}

fn nonfinite(step: u64, l_mse: f64, l_d: f64, phase: &str) -> Error {
    Error::NonFinite {
        step,
        detail: format!("{phase}: l_mse={l_mse}, l_d={l_d}"),
    }
}

fn step<S: Scalar>(ck: &mut Checkpoint<S>, batch: &Batch<S>, schedule: &NoiseSchedule) -> Result<(LossReport, Option<StepTrace>)> {
    batch.x0.check_same_shape(&batch.x_low)?;
    let trace_on = ck.config.trace;
    let lambda = ck.config.lambda_adv;
    let step_index = ck.step;
    let mut rng = derive(ck.config.seed ^ STEP_SALT, step_index);
    let codec_before = if trace_on { ck.codec.content_hash() } else { String::new() };

    // (1) encode
    let z0 = ck.codec.encode(&batch.x0)?;
    let z_low = ck.codec.encode(&batch.x_low)?;
    let shape = z0.shape();
    let n = shape[0];

    // (2) per-element t, forward diffusion
    let t_max = schedule.timesteps();
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=t_max)).collect();
    let noise = LatentTensor::<S>::randn(shape, &mut rng);
    let z_t = forward_diffuse_batch(&z0, &t, schedule, &noise)?;

    // (3) ẑ_0 on a graph with trainable generator weights
    let mut g = Graph::new();
    let pg = ck.generator.params().bind(&mut g, true);
    let zt_v = g.constant(z_t.to_dyn());
    let zl_v = g.constant(z_low.to_dyn());
    let z0_hat = ck.generator.forward_graph(&mut g, &pg, zt_v, &t, zl_v)?;
    let z0_v = g.constant(z0.to_dyn());
    let l_mse_v = g.mse(z0_hat, z0_v);
    let l_mse = g.scalar(l_mse_v).as_f64();

    // (4) corrupt both latents to s and decode
    let s = ck.state.corruption_timestep();
    let (n_real, n_fake) = draw_pair_noise::<S, _>(shape, &mut rng);
    let z_s = forward_diffuse(&z0, s, schedule, &n_real)?;
    let ab = schedule.alpha_bar(s);
    let nf_v = g.constant(n_fake.to_dyn());
    let a = g.scale(z0_hat, S::lit(ab.sqrt()));
    let b = g.scale(nf_v, S::lit((1.0 - ab).sqrt()));
    let zs_hat = g.add(a, b);
    let x_s = ck.codec.decode(&z_s)?;
    let xs_hat = ck.codec.decode_graph(&mut g, zs_hat)?;
    let xs_hat_detached = ImageTensor::from_dyn(g.value(xs_hat).clone())?;

    // (5) discriminator update on the detached generator branch
    let order = draw_order(n, &mut rng);
    let y = labels::<S>(&order);
    let generator_before_d = if trace_on { ck.generator.params().content_hash() } else { String::new() };
    let pair = concat_in_order(&x_s, &xs_hat_detached, &order)?;
    let mut gd = Graph::new();
    let pd = ck.discriminator.params().bind(&mut gd, true);
    let pair_v = gd.constant(pair.into_dyn());
    let pred = ck.discriminator.forward_graph(&mut gd, &pd, pair_v)?;
    let preds: Vec<S> = gd.value(pred).iter().copied().collect();
    let acc_batch = batch_accuracy(&preds, &order);
    let l_d_disc_v = gd.bce(pred, y.clone(), S::lit(BCE_EPS));
    let l_d_disc = gd.scalar(l_d_disc_v).as_f64();
    if !l_mse.is_finite() || !l_d_disc.is_finite() {
        return Err(nonfinite(step_index, l_mse, l_d_disc, "discriminator step"));
    }
    let d_backup = (ck.discriminator.params().clone(), ck.opt_d.clone());
    let mut grads = gd.backward(l_d_disc_v);
    ck.opt_d.update(ck.discriminator.params_mut(), &pd.collect(&mut grads));
    drop(gd);
    let generator_after_d = if trace_on { ck.generator.params().content_hash() } else { String::new() };

    // (6) generator update through the refreshed, frozen discriminator
    let discriminator_before_g = if trace_on { ck.discriminator.params().content_hash() } else { String::new() };
    let (l_d, root) = if lambda > 0.0 {
        let pd2 = ck.discriminator.params().bind(&mut g, false);
        let xs_v = g.constant(x_s.to_dyn());
        let pair = g.pair_concat(xs_v, xs_hat, order.clone());
        let pred = ck.discriminator.forward_graph(&mut g, &pd2, pair)?;
        let l_d_v = g.bce(pred, y, S::lit(BCE_EPS));
        let l_adv_v = g.scale(l_d_v, -S::one());
        let weighted = g.scale(l_adv_v, S::lit(lambda));
        (g.scalar(l_d_v).as_f64(), g.add(l_mse_v, weighted))
    } else {
        let pair = concat_in_order(&x_s, &xs_hat_detached, &order)?;
        let preds = ck.discriminator.predict(&pair)?;
        (discriminator_loss(preds.as_slice().expect("contiguous"), &order)?, l_mse_v)
    };
    if !l_d.is_finite() || !g.scalar(root).as_f64().is_finite() {
        let (params, opt) = d_backup;
        *ck.discriminator.params_mut() = params;
        ck.opt_d = opt;
        return Err(nonfinite(step_index, l_mse, l_d, "generator step"));
    }
    let mut grads = g.backward(root);
    ck.opt_g.update(ck.generator.params_mut(), &pg.collect(&mut grads));
    let discriminator_after_g = if trace_on { ck.discriminator.params().content_hash() } else { String::new() };

    // (7) accuracy EMA
    ck.state = ck.state.update_ema(acc_batch)?;

    let mut report = combine(l_mse, l_d, lambda);
    report.acc_batch = acc_batch;
    report.s_used = s;

    let trace = trace_on.then(|| {
        let shapes = vec![
            ("z_t", z_t.shape().to_vec()),
            ("z0_hat", g.shape(z0_hat).to_vec()),
            ("z_s", z_s.shape().to_vec()),
            ("zs_hat", g.shape(zs_hat).to_vec()),
            ("x_s", x_s.shape().to_vec()),
            ("xs_hat", g.shape(xs_hat).to_vec()),
        ];
        for (name, sh) in &shapes {
            log::debug!("step {step_index}: {name} {sh:?}");
        }
        log::debug!("step {step_index}: t {t:?} s {s}");
        StepTrace {
            t: t.clone(),
            s,
            shapes,
            hashes: IsolationHashes {
                generator_before_d,
                generator_after_d,
                discriminator_before_g,
                discriminator_after_g,
                codec_before,
                codec_after: ck.codec.content_hash(),
            },
        }
    });
    Ok((report, trace))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupHeader {
    name: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl OptHeader {
    fn of<S>(opt: &Adam<S>) -> Self {
        Self {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
        }
    }

    fn apply<S>(&self, opt: &mut Adam<S>) {
        opt.lr = self.lr;
        opt.beta1 = self.beta1;
        opt.beta2 = self.beta2;
        opt.eps = self.eps;
        opt.step = self.step;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config_hash: String,
    config: TrainConfig,
    step: u64,
    state: AdaptiveCorruptionState,
    opt_g: OptHeader,
    opt_d: OptHeader,
    groups: Vec<GroupHeader>,
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(format!(
            "checksum mismatch: file is corrupt or truncated (format version {version})"
        )));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20 + len)
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((header, &body[20 + len..]))
}

/// Element type of the weights stored in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
        .map(|(h, _)| h.dtype)
        .map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
}

pub const LOSS_COLUMNS: [&str; 9] = ["step", "l_mse", "l_d", "l_adv", "l_g", "acc_batch", "acc_ema", "s_used", "lambda_adv"];

/// Appends one CSV row per step. Reopening an existing stream for a resumed
/// run drops any rows at or after the resume step.
pub struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    pub fn open(path: &Path, from_step: u64) -> Result<Self> {
        let kept = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            if header != LOSS_COLUMNS.join(",") {
                return Err(Error::Config(format!("{} is not a loss stream", path.display())));
            }
            lines
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < from_step))
                .map(|l| format!("{l}\n"))
                .collect::<String>()
        } else {
            String::new()
        };
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", LOSS_COLUMNS.join(",")).map_err(|e| Error::io(path, e))?;
        file.write_all(kept.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, step: u64, r: &LossReport, state: &AdaptiveCorruptionState) -> Result<()> {
        writeln!(
            self.out,
            "{step},{},{},{},{},{},{},{},{}",
            r.l_mse, r.l_d, r.l_adv, r.l_g, r.acc_batch, state.acc_ema, r.s_used, r.lambda_adv
        )
        .and_then(|_| self.out.flush())
        .map_err(|e| Error::io(&self.path, e))
    }
}
