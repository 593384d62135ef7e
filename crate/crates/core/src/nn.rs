//! Parameter storage, the small set of layers the networks are built from,
//! and the Adam optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::graph::{ConvGeom, Gradients, Graph, Var};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<ArrayD<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value.as_standard_layout().into_owned());
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let bound = gain / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect();
        self.add(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), S::lit(value)))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<S>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every tensor on the tape. `trainable = false` detaches them.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.leaf(v.clone(), trainable)).collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            v.iter().for_each(|x| x.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A [`ParamStore`] placed on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; `None` where a tensor did not contribute.
    pub fn collect<S: Scalar>(&self, grads: &mut Gradients<S>) -> Vec<Option<ArrayD<S>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, in_channels, out_channels, kernel, stride, pad, 1.0, rng)
    }

    /// `gain` scales the init range; small gains keep residual branches near
    /// identity at initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            gain,
            rng,
        );
        let bias = Some(store.add_uniform(format!("{name}.bias"), &[out_channels], fan_in, gain, rng));
        Self {
            weight,
            bias,
            geom: ConvGeom { kernel, stride, pad },
            in_channels,
            out_channels,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[output, input], input, 1.0, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[output], input, 1.0, rng);
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0),
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, S::lit(1e-5))
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Adam with bias correction. Moment buffers follow store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<S>>,
    pub v: Vec<ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |s: &ParamStore<S>| s.values().iter().map(|v| ArrayD::zeros(v.raw_dim())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Applies one update. Tensors whose gradient is `None` are untouched.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - self.beta1), S::lit(1.0 - self.beta2));
        let step_size = S::lit(self.lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(self.eps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = &mut store.values_mut()[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}
