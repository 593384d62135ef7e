use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use supres_core::autoencoder::{AutoencoderSpec, CodecKind};
use supres_core::diffusion::{SamplerConfig, SamplingMethod};
use supres_core::trainer::{Precision, TrainConfig};
use supres_core::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image directory; the synthetic corpus is used when absent.
    pub dir: Option<PathBuf>,
    /// Synthetic training images.
    pub synthetic: usize,
    /// Synthetic held-out images for `evaluate` and `sweep-steps`.
    pub test_synthetic: usize,
    pub patch: usize,
    pub scale: usize,
    pub seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synthetic: 2000,
            test_synthetic: 64,
            patch: 64,
            scale: 4,
            seed: 0,
            test_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualChoice {
    #[default]
    Pyramid,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Step counts for `sweep-steps`.
    pub steps: Vec<usize>,
    pub methods: Vec<SamplingMethod>,
    pub report_dir: Option<PathBuf>,
    pub perceptual: PerceptualChoice,
    /// Sampling seed for `upscale`, `evaluate` and `sweep-steps`.
    pub seed: u64,
    /// Bicubic-upsample `upscale` inputs by `data.scale` first instead of
    /// treating them as pre-upsampled canvases.
    pub upsample_input: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: vec![1, 3, 5, 10, 25, 50],
            methods: vec![SamplingMethod::Ancestral, SamplingMethod::Deterministic],
            report_dir: None,
            perceptual: PerceptualChoice::Pyramid,
            seed: 0,
            upsample_input: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    /// Parent of every run directory.
    pub run_root: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            run_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            train: TrainConfig::toy(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: config format_version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..12].to_string()
    }

    /// Fresh `<run_root>/<timestamp>-<hash>` directory with the effective
    /// config written into it.
    pub fn create_run_dir(&self, explicit: Option<&Path>) -> Result<PathBuf, Error> {
        let dir = match explicit {
            Some(d) => d.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = format!("{stamp}-{}", self.hash());
                let mut dir = self.run_root.join(&base);
                let mut k = 1;
                while dir.exists() {
                    dir = self.run_root.join(format!("{base}-{k}"));
                    k += 1;
                }
                dir
            }
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(dir)
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Directory of PNG/JPEG images [data.dir].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use N synthetic images instead of a directory [data.synthetic or data.test_synthetic].
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Patch side in pixels [data.patch].
    #[arg(long)]
    pub patch: Option<usize>,
    /// Degradation factor [data.scale].
    #[arg(long)]
    pub scale: Option<usize>,
    /// Training seed for `train`, sampling seed otherwise [train.seed / eval.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps for `train`, sampler steps otherwise [train.total_steps / sampler.num_steps].
    #[arg(long)]
    pub steps: Option<usize>,
    /// ddpm (ancestral) or ddim (deterministic) [sampler.method].
    #[arg(long)]
    pub method: Option<String>,
    /// DDIM stochasticity [sampler.eta].
    #[arg(long)]
    pub eta: Option<f64>,
    /// identity or conv_vae [train.autoencoder].
    #[arg(long)]
    pub autoencoder: Option<String>,
    /// Training or evaluation batch size [train.batch_size / eval.batch_size].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adversarial loss weight [train.lambda_adv].
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    /// f32 or f64 [train.precision].
    #[arg(long)]
    pub precision: Option<String>,
    /// Where tables are written [eval.report_dir].
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    /// Parent of run directories [run_root].
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Infer,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig, role: Role) -> Result<(), Error> {
        if let Some(d) = &self.data_dir {
            cfg.data.dir = Some(d.clone());
        }
        if let Some(n) = self.synthetic {
            cfg.data.dir = None;
            match role {
                Role::Train => cfg.data.synthetic = n,
                Role::Infer => cfg.data.test_synthetic = n,
            }
        }
        if let Some(p) = self.patch {
            cfg.data.patch = p;
        }
        if let Some(s) = self.scale {
            cfg.data.scale = s;
        }
        if let Some(seed) = self.seed {
            match role {
                Role::Train => cfg.train.seed = seed,
                Role::Infer => cfg.eval.seed = seed,
            }
        }
        if let Some(n) = self.steps {
            match role {
                Role::Train => cfg.train.total_steps = n as u64,
                Role::Infer => cfg.sampler.num_steps = n,
            }
        }
        if let Some(m) = &self.method {
            cfg.sampler.method = m.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        if let Some(eta) = self.eta {
            cfg.sampler.eta = eta;
        }
        if let Some(kind) = &self.autoencoder {
            let kind: CodecKind = kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            if kind != cfg.train.autoencoder.kind {
                cfg.train.autoencoder = match kind {
                    CodecKind::Identity => AutoencoderSpec::identity(),
                    CodecKind::ConvVae => AutoencoderSpec::conv_vae(),
                };
            }
        }
        if let Some(b) = self.batch_size {
            match role {
                Role::Train => cfg.train.batch_size = b,
                Role::Infer => cfg.eval.batch_size = b,
            }
        }
        if let Some(l) = self.lambda_adv {
            cfg.train.lambda_adv = l;
        }
        if let Some(p) = &self.precision {
            cfg.train.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(Error::Config(format!("unknown precision '{other}' (expected f32 or f64)"))),
            };
        }
        if let Some(r) = &self.report_dir {
            cfg.eval.report_dir = Some(r.clone());
        }
        if let Some(r) = &self.run_root {
            cfg.run_root = r.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[data]\npatches = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 3").is_err());
    }

    #[test]
    fn flags_override_by_role() {
        let o = Overrides {
            steps: Some(3),
            seed: Some(7),
            method: Some("ddpm".into()),
            synthetic: Some(5),
            ..Default::default()
        };
        let mut t = RunConfig::default();
        o.apply(&mut t, Role::Train).unwrap();
        assert_eq!((t.train.total_steps, t.train.seed, t.data.synthetic), (3, 7, 5));
        let mut i = RunConfig::default();
        o.apply(&mut i, Role::Infer).unwrap();
        assert_eq!((i.sampler.num_steps, i.eval.seed, i.data.test_synthetic), (3, 7, 5));
        assert_eq!(i.sampler.method, SamplingMethod::Ancestral);
        let bad = Overrides {
            method: Some("euler".into()),
            ..Default::default()
        };
        assert!(matches!(bad.apply(&mut i, Role::Infer), Err(Error::Config(_))));
    }
}
