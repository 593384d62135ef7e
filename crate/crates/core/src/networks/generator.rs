use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{time_embedding, Denoiser};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::LatentTensor;

/// U-Net hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_width: usize,
    /// Width multiplier per resolution level; one level per entry.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Self-attention after every residual block of the lowest level.
    pub attention_at_lowest: bool,
    pub time_dim: usize,
    pub groups: usize,
    /// Space-to-depth factor applied to the input before the first conv
    /// (and undone after the last). 1 disables it.
    pub stem_factor: usize,
    /// Predict `z_low + U(...)` instead of `U(...)`.
    pub residual_condition: bool,
    /// Init-range scale of the output conv.
    pub output_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            attention_at_lowest: true,
            time_dim: 256,
            groups: 8,
            stem_factor: 1,
            residual_condition: true,
            output_gain: 0.1,
        }
    }
}

impl GeneratorConfig {
    /// Small configuration for single-core CPU experiments on 64x64 canvases.
    pub fn toy() -> Self {
        Self {
            base_width: 32,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attention_at_lowest: true,
            time_dim: 64,
            groups: 8,
            stem_factor: 2,
            residual_condition: true,
            output_gain: 0.1,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.stem_factor.max(1) << self.channel_mults.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config("generator widths must be positive and non-empty".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.base_width % 2 != 0 {
            return Err(Error::Config("generator time_dim and base_width must be even".into()));
        }
        if self.stem_factor == 0 || self.groups == 0 {
            return Err(Error::Config("generator stem_factor and groups must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &GeneratorConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.time_dim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::with_gain(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let e = self.time.forward(g, p, temb);
        let h = g.channel_bias(h, e);
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, p, x),
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl AttnBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        cfg: &GeneratorConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, cfg.groups),
            q: Conv2d::new(store, &format!("{name}.q"), c, c, 1, 1, 0, rng),
            k: Conv2d::new(store, &format!("{name}.k"), c, c, 1, 1, 0, rng),
            v: Conv2d::new(store, &format!("{name}.v"), c, c, 1, 1, 0, rng),
            proj: Conv2d::with_gain(store, &format!("{name}.proj"), c, c, 1, 1, 0, 0.5, rng),
            channels: c,
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(g, p, x);
        let q = self.q.forward(g, p, h);
        let k = self.k.forward(g, p, h);
        let v = self.v.forward(g, p, h);
        let q = g.reshape(q, &[n, c, hw]);
        let k = g.reshape(k, &[n, c, hw]);
        let v = g.reshape(v, &[n, c, hw]);
        // scores[i, j] = q_i · k_j / sqrt(c)
        let scores = g.bmm(q, k, true, false);
        let scores = g.scale(scores, S::lit(1.0 / (self.channels as f64).sqrt()));
        let attn = g.softmax(scores);
        // out[c, i] = sum_j v[c, j] attn[i, j]
        let out = g.bmm(v, attn, false, true);
        let out = g.reshape(out, &shape);
        let out = self.proj.forward(g, p, out);
        g.add(x, out)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    resample: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UNet {
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Stage>,
    mid: (ResBlock, Option<AttnBlock>, ResBlock),
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Clean-latent predictor `ẑ_0 = G(z_t, t, z_low)`.
///
/// `z_t` and `z_low` are concatenated along channels at the input.
#[derive(Debug, Clone)]
pub struct Generator<S> {
    config: GeneratorConfig,
    latent_channels: usize,
    max_timestep: usize,
    net: UNet,
    params: ParamStore<S>,
}

impl<S: Scalar> Generator<S> {
    pub fn new<R: Rng + ?Sized>(
        config: GeneratorConfig,
        latent_channels: usize,
        max_timestep: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if latent_channels == 0 || max_timestep == 0 {
            return Err(Error::Config("latent channels and max timestep must be positive".into()));
        }
        let cfg = &config;
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = cfg.stem_factor;
        let base = cfg.base_width;
        let time_in = Linear::new(s, "time.fc1", base, cfg.time_dim, rng);
        let time_out = Linear::new(s, "time.fc2", cfg.time_dim, cfg.time_dim, rng);
        let conv_in = Conv2d::new(s, "conv_in", 2 * latent_channels * r * r, base, 3, 1, 1, rng);

        let levels = cfg.channel_mults.len();
        let mut skip_channels = vec![base];
        let mut ch = base;
        let mut down = Vec::with_capacity(levels);
        for (li, &mult) in cfg.channel_mults.iter().enumerate() {
            let out = base * mult;
            let lowest = li + 1 == levels;
            let mut blocks = Vec::new();
            for bi in 0..cfg.res_blocks {
                let name = format!("down{li}.block{bi}");
                let res = ResBlock::new(s, &name, ch, out, cfg, rng);
                let attn = (lowest && cfg.attention_at_lowest)
                    .then(|| AttnBlock::new(s, &format!("{name}.attn"), out, cfg, rng));
                blocks.push((res, attn));
                ch = out;
                skip_channels.push(ch);
            }
            let resample = (!lowest).then(|| Conv2d::new(s, &format!("down{li}.downsample"), ch, ch, 3, 2, 1, rng));
            if resample.is_some() {
                skip_channels.push(ch);
            }
            down.push(Stage { blocks, resample });
        }

        let mid = (
            ResBlock::new(s, "mid.block0", ch, ch, cfg, rng),
            cfg.attention_at_lowest.then(|| AttnBlock::new(s, "mid.attn", ch, cfg, rng)),
            ResBlock::new(s, "mid.block1", ch, ch, cfg, rng),
        );

        let mut up = Vec::with_capacity(levels);
        for (li, &mult) in cfg.channel_mults.iter().enumerate().rev() {
            let out = base * mult;
            let lowest = li + 1 == levels;
            let mut blocks = Vec::new();
            for bi in 0..=cfg.res_blocks {
                let skip = skip_channels.pop().expect("one skip per decoder block");
                let name = format!("up{li}.block{bi}");
                let res = ResBlock::new(s, &name, ch + skip, out, cfg, rng);
                let attn = (lowest && cfg.attention_at_lowest)
                    .then(|| AttnBlock::new(s, &format!("{name}.attn"), out, cfg, rng));
                blocks.push((res, attn));
                ch = out;
            }
            let resample = (li != 0).then(|| Conv2d::new(s, &format!("up{li}.upsample"), ch, ch, 3, 1, 1, rng));
            up.push(Stage { blocks, resample });
        }
        debug_assert!(skip_channels.is_empty());

        let norm_out = GroupNorm::new(s, "norm_out", ch, cfg.groups);
        let conv_out = Conv2d::with_gain(s, "conv_out", ch, latent_channels * r * r, 3, 1, 1, cfg.output_gain, rng);

        Ok(Self {
            latent_channels,
            max_timestep,
            net: UNet {
                time_in,
                time_out,
                conv_in,
                down,
                mid,
                up,
                norm_out,
                conv_out,
            },
            params: store,
            config,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn max_timestep(&self) -> usize {
        self.max_timestep
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn validate_inputs(&self, zt: &[usize], t: &[usize], zl: &[usize]) -> Result<()> {
        if zt != zl {
            return Err(Error::shape(zt, zl));
        }
        if zt.len() != 4 || zt[1] != self.latent_channels {
            return Err(Error::arg(format!(
                "generator expects [batch, {}, h, w] latents, got {zt:?}",
                self.latent_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if zt[2] % m != 0 || zt[3] % m != 0 || zt[2] == 0 || zt[3] == 0 {
            return Err(Error::arg(format!(
                "latent spatial size {}x{} must be a positive multiple of {m}",
                zt[2], zt[3]
            )));
        }
        if t.len() != zt[0] {
            return Err(Error::arg(format!("{} timesteps for a batch of {}", t.len(), zt[0])));
        }
        if let Some(bad) = t.iter().find(|&&v| v == 0 || v > self.max_timestep) {
            return Err(Error::arg(format!("timestep {bad} outside 1..={}", self.max_timestep)));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `p` must come from `self.params()`.
    pub fn forward_graph(&self, g: &mut Graph<S>, p: &Bound, z_t: Var, t: &[usize], z_low: Var) -> Result<Var> {
        self.validate_inputs(g.shape(z_t), t, g.shape(z_low))?;
        let net = &self.net;
        let r = self.config.stem_factor;

        let emb = time_embedding::<S>(t, self.config.base_width)?;
        let emb = g.constant(emb.into_dyn());
        let temb = net.time_in.forward(g, p, emb);
        let temb = g.silu(temb);
        let temb = net.time_out.forward(g, p, temb);
        // every residual block consumes silu(temb)
        let temb = g.silu(temb);

        let x = g.concat(&[z_t, z_low]);
        let x = if r > 1 { g.space_to_depth(x, r) } else { x };
        let mut h = net.conv_in.forward(g, p, x);
        let mut skips = vec![h];
        for stage in &net.down {
            for (res, attn) in &stage.blocks {
                h = res.forward(g, p, h, temb);
                if let Some(a) = attn {
                    h = a.forward(g, p, h);
                }
                skips.push(h);
            }
            if let Some(conv) = &stage.resample {
                h = conv.forward(g, p, h);
                skips.push(h);
            }
        }
        h = net.mid.0.forward(g, p, h, temb);
        if let Some(a) = &net.mid.1 {
            h = a.forward(g, p, h);
        }
        h = net.mid.2.forward(g, p, h, temb);
        for stage in &net.up {
            for (res, attn) in &stage.blocks {
                let skip = skips.pop().expect("skip stack matches decoder");
                let cat = g.concat(&[h, skip]);
                h = res.forward(g, p, cat, temb);
                if let Some(a) = attn {
                    h = a.forward(g, p, h);
                }
            }
            if let Some(conv) = &stage.resample {
                h = g.upsample2x(h);
                h = conv.forward(g, p, h);
            }
        }
        let h = net.norm_out.forward(g, p, h);
        let h = g.silu(h);
        let h = net.conv_out.forward(g, p, h);
        let h = if r > 1 { g.depth_to_space(h, r) } else { h };
        Ok(if self.config.residual_condition {
            g.add(h, z_low)
        } else {
            h
        })
    }
}

impl<S: Scalar> Denoiser<S> for Generator<S> {
    fn predict_clean(&self, z_t: &LatentTensor<S>, t: &[usize], z_low: &LatentTensor<S>) -> Result<LatentTensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zt = g.constant(z_t.to_dyn());
        let zl = g.constant(z_low.to_dyn());
        let out = self.forward_graph(&mut g, &p, zt, t, zl)?;
        LatentTensor::from_dyn(g.value(out).clone())
    }
}
