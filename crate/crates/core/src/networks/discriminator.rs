use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Output width of each stride-2 stage.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 128],
            groups: 8,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct DiscStage {
    conv: Conv2d,
    norm: Option<GroupNorm>,
}

/// Predicts, per batch element, the probability that the real image occupies
/// the first channel block of a `[real ‖ fake]` / `[fake ‖ real]` pair.
///
/// Strided conv stages, global average pooling, one logit, sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator<S> {
    config: DiscriminatorConfig,
    image_channels: usize,
    stages: Vec<DiscStage>,
    head: Linear,
    params: ParamStore<S>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, image_channels: usize, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || image_channels == 0 {
            return Err(Error::Config("discriminator widths must be positive and non-empty".into()));
        }
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut ch = 2 * image_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("stage{i}.conv"), ch, w, 4, 2, 1, rng);
            let norm = (i > 0).then(|| GroupNorm::new(&mut store, &format!("stage{i}.norm"), w, config.groups));
            stages.push(DiscStage { conv, norm });
            ch = w;
        }
        let head = Linear::new(&mut store, "head", ch, 1, rng);
        Ok(Self {
            config,
            image_channels,
            stages,
            head,
            params: store,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Zeroes the output layer so every prediction is exactly 0.5.
    pub fn zero_head(&mut self) {
        let names: Vec<String> = self.params.names().to_vec();
        for (name, v) in names.iter().zip(self.params.values_mut()) {
            if name.starts_with("head.") {
                v.fill(S::zero());
            }
        }
    }

    /// Records the forward pass; returns probabilities of shape `[batch]`.
    pub fn forward_graph(&self, g: &mut Graph<S>, p: &Bound, pair: Var) -> Result<Var> {
        let shape = g.shape(pair).to_vec();
        if shape.len() != 4 || shape[1] != 2 * self.image_channels {
            return Err(Error::arg(format!(
                "discriminator expects [batch, {}, h, w] pairs, got {shape:?}",
                2 * self.image_channels
            )));
        }
        let min_side = 1usize << self.stages.len();
        if shape[2] < min_side || shape[3] < min_side {
            return Err(Error::arg(format!(
                "pair spatial size {}x{} is below the {min_side}x{min_side} minimum",
                shape[2], shape[3]
            )));
        }
        let slope = S::lit(self.config.leaky_slope);
        let mut h = pair;
        for stage in &self.stages {
            h = stage.conv.forward(g, p, h);
            if let Some(norm) = &stage.norm {
                h = norm.forward(g, p, h);
            }
            h = g.leaky_relu(h, slope);
        }
        let pooled = g.global_avg_pool(h);
        let logit = self.head.forward(g, p, pooled);
        let prob = g.sigmoid(logit);
        Ok(g.reshape(prob, &[shape[0]]))
    }

    /// Inference-only convenience wrapper.
    pub fn predict(&self, pair: &ImageTensor<S>) -> Result<Array1<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(pair.to_dyn());
        let out = self.forward_graph(&mut g, &p, x)?;
        Ok(Array1::from_vec(g.value(out).iter().copied().collect()))
    }
}
