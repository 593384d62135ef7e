//! Latent codecs: an exact identity and a small convolutional VAE that is
//! pre-trained once and then frozen.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Bound, Conv2d, ParamStore};
use crate::rng::{derive, normal_array};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, LatentTensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    ConvVae,
}

impl std::str::FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "conv_vae" => Ok(Self::ConvVae),
            other => Err(Error::Config(format!("unknown autoencoder '{other}' (expected identity or conv_vae)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSpec {
    pub kind: CodecKind,
    pub latent_channels: usize,
    /// Base conv width of the VAE.
    pub width: usize,
    /// Weight of the KL term during pre-training.
    pub kl_weight: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Side of the square crops used for pre-training.
    pub pretrain_patch: usize,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            kind: CodecKind::Identity,
            latent_channels: IMAGE_CHANNELS,
            width: 32,
            kl_weight: 1e-6,
            pretrain_steps: 3000,
            pretrain_batch: 16,
            pretrain_lr: 1e-3,
            pretrain_patch: 32,
        }
    }
}

impl AutoencoderSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn conv_vae() -> Self {
        Self {
            kind: CodecKind::ConvVae,
            latent_channels: 4,
            ..Self::default()
        }
    }

    pub fn spatial_factor(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 1,
            CodecKind::ConvVae => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CodecKind::Identity if self.latent_channels != IMAGE_CHANNELS => Err(Error::Config(format!(
                "identity codec needs latent_channels = {IMAGE_CHANNELS}, got {}",
                self.latent_channels
            ))),
            CodecKind::ConvVae if self.latent_channels == 0 || self.width == 0 => {
                Err(Error::Config("conv_vae needs positive latent_channels and width".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct ResUnit {
    a: Conv2d,
    b: Conv2d,
}

impl ResUnit {
    fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.a"), c, c, 3, 1, 1, rng),
            b: Conv2d::with_gain(store, &format!("{name}.b"), c, c, 3, 1, 1, 0.5, rng),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        let h = g.silu(x);
        let h = self.a.forward(g, p, h);
        let h = g.silu(h);
        let h = self.b.forward(g, p, h);
        g.add(x, h)
    }
}

/// ×4 convolutional VAE: two stride-2 stages down, two nearest-neighbour
/// upsampling stages back.
#[derive(Debug, Clone)]
pub struct ConvVae<S> {
    spec: AutoencoderSpec,
    enc_in: Conv2d,
    enc_down1: Conv2d,
    enc_down2: Conv2d,
    enc_res: ResUnit,
    enc_mu: Conv2d,
    enc_logvar: Conv2d,
    dec_in: Conv2d,
    dec_res: ResUnit,
    dec_up1: Conv2d,
    dec_up2: Conv2d,
    dec_out: Conv2d,
    params: ParamStore<S>,
}

impl<S: Scalar> ConvVae<S> {
    pub fn new<R: Rng + ?Sized>(spec: AutoencoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (w, l) = (spec.width, spec.latent_channels);
        let mut s = ParamStore::new();
        let st = &mut s;
        Ok(Self {
            enc_in: Conv2d::new(st, "enc.in", IMAGE_CHANNELS, w, 3, 1, 1, rng),
            enc_down1: Conv2d::new(st, "enc.down1", w, 2 * w, 3, 2, 1, rng),
            enc_down2: Conv2d::new(st, "enc.down2", 2 * w, 2 * w, 3, 2, 1, rng),
            enc_res: ResUnit::new(st, "enc.res", 2 * w, rng),
            enc_mu: Conv2d::new(st, "enc.mu", 2 * w, l, 3, 1, 1, rng),
            enc_logvar: Conv2d::with_gain(st, "enc.logvar", 2 * w, l, 3, 1, 1, 0.1, rng),
            dec_in: Conv2d::new(st, "dec.in", l, 2 * w, 3, 1, 1, rng),
            dec_res: ResUnit::new(st, "dec.res", 2 * w, rng),
            dec_up1: Conv2d::new(st, "dec.up1", 2 * w, 2 * w, 3, 1, 1, rng),
            dec_up2: Conv2d::new(st, "dec.up2", 2 * w, w, 3, 1, 1, rng),
            dec_out: Conv2d::new(st, "dec.out", w, IMAGE_CHANNELS, 3, 1, 1, rng),
            params: s,
            spec,
        })
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Posterior mean and log-variance.
    fn encode_graph(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> (Var, Var) {
        let h = self.enc_in.forward(g, p, x);
        let h = g.silu(h);
        let h = self.enc_down1.forward(g, p, h);
        let h = g.silu(h);
        let h = self.enc_down2.forward(g, p, h);
        let h = self.enc_res.forward(g, p, h);
        let h = g.silu(h);
        (self.enc_mu.forward(g, p, h), self.enc_logvar.forward(g, p, h))
    }

    /// Unclamped reconstruction.
    fn decode_graph(&self, g: &mut Graph<S>, p: &Bound, z: Var) -> Var {
        let h = self.dec_in.forward(g, p, z);
        let h = self.dec_res.forward(g, p, h);
        let h = g.silu(h);
        let h = g.upsample2x(h);
        let h = self.dec_up1.forward(g, p, h);
        let h = g.silu(h);
        let h = g.upsample2x(h);
        let h = self.dec_up2.forward(g, p, h);
        let h = g.silu(h);
        self.dec_out.forward(g, p, h)
    }

    /// MSE + KL pre-training on crops of `data`. Returns the per-step loss.
    pub fn pretrain(&mut self, data: &mut PairedDataset<S>, seed: u64) -> Result<Vec<f64>> {
        let spec = self.spec.clone();
        let mut opt = Adam::new(&self.params, spec.pretrain_lr, 0.9, 0.999);
        let mut losses = Vec::with_capacity(spec.pretrain_steps);
        let kl_weight = S::lit(spec.kl_weight);
        for step in 0..spec.pretrain_steps {
            let x = data.batch(step as u64, spec.pretrain_batch)?.x0;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let xv = g.constant(x.to_dyn());
            let (mu, logvar) = self.encode_graph(&mut g, &p, xv);
            let noise = normal_array::<S, _>(&mut derive(seed, step as u64), g.shape(mu));
            let nv = g.constant(noise);
            let half = g.scale(logvar, S::lit(0.5));
            let std = g.exp(half);
            let eps = g.mul(std, nv);
            let z = g.add(mu, eps);
            let recon = self.decode_graph(&mut g, &p, z);
            let rec = g.mse(recon, xv);
            let kl = g.kl_normal(mu, logvar);
            let kl = g.scale(kl, kl_weight);
            let loss = g.add(rec, kl);
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    detail: format!("autoencoder pre-training loss {value}"),
                });
            }
            losses.push(value);
            let mut grads = g.backward(loss);
            opt.update(&mut self.params, &p.collect(&mut grads));
        }
        Ok(losses)
    }
}

/// A frozen codec between pixel space and latent space.
#[derive(Debug, Clone)]
pub enum Codec<S> {
    Identity,
    ConvVae(Box<ConvVae<S>>),
}

impl<S: Scalar> Codec<S> {
    pub fn from_spec<R: Rng + ?Sized>(spec: &AutoencoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            CodecKind::Identity => Codec::Identity,
            CodecKind::ConvVae => Codec::ConvVae(Box::new(ConvVae::new(spec.clone(), rng)?)),
        })
    }

    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Identity => CodecKind::Identity,
            Codec::ConvVae(_) => CodecKind::ConvVae,
        }
    }

    pub fn spatial_factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::ConvVae(_) => 4,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Identity => IMAGE_CHANNELS,
            Codec::ConvVae(v) => v.spec.latent_channels,
        }
    }

    pub fn params(&self) -> Option<&ParamStore<S>> {
        match self {
            Codec::Identity => None,
            Codec::ConvVae(v) => Some(&v.params),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore<S>> {
        match self {
            Codec::Identity => None,
            Codec::ConvVae(v) => Some(&mut v.params),
        }
    }

    /// Hash of the frozen weights (constant for the identity codec).
    pub fn content_hash(&self) -> String {
        match self {
            Codec::Identity => ParamStore::<S>::new().content_hash(),
            Codec::ConvVae(v) => v.params.content_hash(),
        }
    }

    fn check_image(&self, image: &ImageTensor<S>) -> Result<()> {
        let [_, c, h, w] = image.shape();
        let f = self.spatial_factor();
        if c != IMAGE_CHANNELS {
            return Err(Error::arg(format!("expected {IMAGE_CHANNELS} image channels, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::arg(format!("image {h}x{w} must be divisible by the codec factor {f}")));
        }
        Ok(())
    }

    /// Deterministic encoding (posterior mean for the VAE).
    pub fn encode(&self, image: &ImageTensor<S>) -> Result<LatentTensor<S>> {
        self.check_image(image)?;
        match self {
            Codec::Identity => Ok(LatentTensor(image.0.clone())),
            Codec::ConvVae(v) => {
                let mut g = Graph::new();
                let p = v.params.bind(&mut g, false);
                let x = g.constant(image.to_dyn());
                let (mu, _) = v.encode_graph(&mut g, &p, x);
                LatentTensor::from_dyn(g.value(mu).clone())
            }
        }
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.latent_channels() {
            return Err(Error::arg(format!(
                "expected a [batch, {}, h, w] latent, got {shape:?}",
                self.latent_channels()
            )));
        }
        Ok(())
    }

    /// Decodes and clamps to [−1, 1].
    pub fn decode(&self, latent: &LatentTensor<S>) -> Result<ImageTensor<S>> {
        let mut g = Graph::new();
        let z = g.constant(latent.to_dyn());
        let out = self.decode_graph(&mut g, z)?;
        ImageTensor::from_dyn(g.value(out).clone())
    }

    /// Records decoding on `g` with the codec weights as constants, so
    /// gradients reach `z` but never the codec.
    pub fn decode_graph(&self, g: &mut Graph<S>, z: Var) -> Result<Var> {
        self.check_latent(g.shape(z))?;
        let out = match self {
            Codec::Identity => z,
            Codec::ConvVae(v) => {
                let p = v.params.bind(g, false);
                v.decode_graph(g, &p, z)
            }
        };
        Ok(g.clamp(out, -S::one(), S::one()))
    }

    /// Pre-trains the VAE on `data`; a no-op for the identity codec.
    pub fn pretrain(&mut self, data: &mut PairedDataset<S>, seed: u64) -> Result<Vec<f64>> {
        match self {
            Codec::Identity => Ok(Vec::new()),
            Codec::ConvVae(v) => v.pretrain(data, seed),
        }
    }

    pub fn spec(&self) -> AutoencoderSpec {
        match self {
            Codec::Identity => AutoencoderSpec::identity(),
            Codec::ConvVae(v) => v.spec.clone(),
        }
    }

    /// Overwrites the VAE weights; used when restoring checkpoints.
    pub fn load_params(&mut self, values: Vec<ArrayD<S>>) -> Result<()> {
        match self.params_mut() {
            None if values.is_empty() => Ok(()),
            None => Err(Error::Format("identity codec has no weights".into())),
            Some(store) => load_into(store, values),
        }
    }
}

/// Replaces every tensor of `store`, checking shapes.
pub(crate) fn load_into<S: Scalar>(store: &mut ParamStore<S>, values: Vec<ArrayD<S>>) -> Result<()> {
    if values.len() != store.len() {
        return Err(Error::Format(format!("expected {} tensors, found {}", store.len(), values.len())));
    }
    for (slot, v) in store.values_mut().iter_mut().zip(values) {
        if slot.shape() != v.shape() {
            return Err(Error::Format(format!("tensor shape {:?} does not match {:?}", v.shape(), slot.shape())));
        }
        *slot = v;
    }
    Ok(())
}
