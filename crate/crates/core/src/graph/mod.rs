//! Tape-based reverse-mode automatic differentiation over `ndarray` values.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! row-major `ArrayD`s; image-like tensors use the `[batch, channels, h, w]`
//! layout. [`Graph::backward`] walks the tape once in reverse and returns a
//! gradient for every node that (transitively) depends on a leaf created
//! with `requires_grad = true`. Leaves created without it act as detached
//! constants, which is how frozen and alternating parameter sets are
//! expressed.
//!
//! Shape violations inside the graph are programming errors and panic;
//! user-facing shape checks live in the model layers.

mod kernels;

use ndarray::{ArrayD, IxDyn};

pub use kernels::ConvGeom;
pub(crate) use kernels::{gemm, sigmoid};

use crate::scalar::Scalar;
use kernels::{col2im, im2col};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        // (mean, 1/std) per (batch, group)
        stats: Vec<(S, S)>,
    },
    Silu(Var),
    LeakyRelu(Var, S),
    Sigmoid(Var),
    Exp(Var),
    Upsample2x(Var),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Concat(Vec<Var>),
    PairConcat {
        real: Var,
        fake: Var,
        real_first: Vec<bool>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Mse(Var, Var),
    Bce {
        p: Var,
        y: Vec<S>,
        eps: S,
    },
    KlNormal {
        mu: Var,
        logvar: Var,
    },
    Mean(Var),
}

struct Node<S> {
    value: ArrayD<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline]
fn sl<S>(a: &ArrayD<S>) -> &[S] {
    a.as_slice().expect("graph values are contiguous")
}

#[inline]
fn sl_mut<S>(a: &mut ArrayD<S>) -> &mut [S] {
    a.as_slice_mut().expect("graph values are contiguous")
}

fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a rank-4 tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<S>, requires_grad: bool) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A detached input.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> S {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "not a scalar node");
        sl(a)[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> ArrayD<S> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data: Vec<S> = sl(va).iter().zip(sl(vb)).map(|(&x, &y)| f(x, y)).collect();
        ArrayD::from_shape_vec(IxDyn(va.shape()), data).unwrap()
    }

    fn unary(&self, a: Var, f: impl Fn(S) -> S) -> ArrayD<S> {
        self.nodes[a.0].value.mapv(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.unary(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `x[n, c, ...] + bias[n, c]`, broadcasting over the trailing axes.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(bv.shape(), &[n, c], "channel bias must be [batch, channels]");
        let inner = xv.len() / (n * c);
        let mut out = xv.clone();
        let b = sl(bv);
        for (i, chunk) in sl_mut(&mut out).chunks_mut(inner).enumerate() {
            let add = b[i];
            chunk.iter_mut().for_each(|v| *v = *v + add);
        }
        self.push(out, Op::ChannelBias { x, bias }, &[x, bias])
    }

    /// 2-D convolution, weights `[out, in, k, k]`, optional bias `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (n, c, h, wd) = dims4(xv.shape());
        let (oc, ic, kh, kw) = dims4(wv.shape());
        assert_eq!(ic, c, "conv input channels");
        assert_eq!((kh, kw), (geom.kernel, geom.kernel), "conv kernel size");
        let oh = geom.out_dim(h).expect("conv output height");
        let ow = geom.out_dim(wd).expect("conv output width");
        let kdim = c * kh * kw;
        let plane = oh * ow;
        let mut out = zeros::<S>(&[n, oc, oh, ow]);
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); kdim * plane]
        };
        let xs = sl(xv);
        let ws = sl(wv);
        let os = sl_mut(&mut out);
        for bi in 0..n {
            let xn = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
            let on = &mut os[bi * oc * plane..(bi + 1) * oc * plane];
            let colm: &[S] = if geom.is_pointwise() {
                xn
            } else {
                im2col(xn, c, h, wd, geom, oh, ow, &mut cols);
                &cols
            };
            gemm(false, false, oc, plane, kdim, S::one(), ws, colm, S::zero(), on);
        }
        if let Some(b) = b {
            let bv = sl(&self.nodes[b.0].value);
            assert_eq!(bv.len(), oc, "conv bias length");
            for (i, chunk) in os.chunks_mut(plane).enumerate() {
                let add = bv[i % oc];
                chunk.iter_mut().for_each(|v| *v = *v + add);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// `x[n, in] · w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.ndim(), 2);
        let (n, din) = (xv.shape()[0], xv.shape()[1]);
        let (dout, win) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(din, win, "linear input width");
        let mut out = zeros::<S>(&[n, dout]);
        gemm(false, true, n, dout, din, S::one(), sl(xv), sl(wv), S::zero(), sl_mut(&mut out));
        if let Some(b) = b {
            let bv = sl(&self.nodes[b.0].value);
            for row in sl_mut(&mut out).chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: S) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        let inner = xv.len() / (n * c);
        let cpg = c / groups;
        let m = cpg * inner;
        let gs = sl(&self.nodes[gamma.0].value);
        let bs = sl(&self.nodes[beta.0].value);
        let mut out = xv.clone();
        let mut stats = Vec::with_capacity(n * groups);
        let inv_m = S::one() / S::lit(m as f64);
        for (gi, chunk) in sl_mut(&mut out).chunks_mut(m).enumerate() {
            let mean = chunk.iter().copied().sum::<S>() * inv_m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_m;
            let rstd = S::one() / (var + eps).sqrt();
            let g0 = (gi % groups) * cpg;
            for (ci, plane) in chunk.chunks_mut(inner).enumerate() {
                let (ga, be) = (gs[g0 + ci], bs[g0 + ci]);
                plane.iter_mut().for_each(|v| *v = (*v - mean) * rstd * ga + be);
            }
            stats.push((mean, rstd));
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let v = self.unary(a, |x| if x > S::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    /// Nearest-neighbour 2x upsampling of a rank-4 tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let (n, c, h, w) = dims4(xv.shape());
        let mut out = zeros::<S>(&[n, c, 2 * h, 2 * w]);
        let xs = sl(xv);
        let os = sl_mut(&mut out);
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut os[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x(a), &[a])
    }

    /// `[n, c, h, w] -> [n, c*r*r, h/r, w/r]`; channel `c*r*r + dy*r + dx`
    /// holds pixel `(y*r + dy, x*r + dx)` of input channel `c`.
    pub fn space_to_depth(&mut self, a: Var, r: usize) -> Var {
        let xv = &self.nodes[a.0].value;
        let (n, c, h, w) = dims4(xv.shape());
        assert!(r > 0 && h % r == 0 && w % r == 0, "space_to_depth factor {r} must divide {h}x{w}");
        let mut out = zeros::<S>(&[n, c * r * r, h / r, w / r]);
        shuffle(sl(xv), sl_mut(&mut out), n, c, h, w, r, true);
        self.push(out, Op::SpaceToDepth(a, r), &[a])
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, a: Var, r: usize) -> Var {
        let xv = &self.nodes[a.0].value;
        let (n, cr, h, w) = dims4(xv.shape());
        assert!(r > 0 && cr % (r * r) == 0, "depth_to_space factor {r} must divide {cr} channels");
        let c = cr / (r * r);
        let mut out = zeros::<S>(&[n, c, h * r, w * r]);
        shuffle(sl(xv), sl_mut(&mut out), n, c, h * r, w * r, r, false);
        self.push(out, Op::DepthToSpace(a, r), &[a])
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let n = first[0];
        let mut chans = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            assert_eq!(s.len(), first.len());
            assert_eq!(s[0], n);
            assert_eq!(&s[2..], &first[2..], "concat trailing dims");
            chans += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let mut shape = first.clone();
        shape[1] = chans;
        let mut data = Vec::with_capacity(n * chans * inner);
        for bi in 0..n {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&sl(v)[bi * block..(bi + 1) * block]);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Per-element ordered channel concatenation: `[real ‖ fake]` where
    /// `real_first[i]`, otherwise `[fake ‖ real]`.
    pub fn pair_concat(&mut self, real: Var, fake: Var, real_first: Vec<bool>) -> Var {
        let rv = &self.nodes[real.0].value;
        let fv = &self.nodes[fake.0].value;
        assert_eq!(rv.shape(), fv.shape(), "pair halves must match");
        let n = rv.shape()[0];
        assert_eq!(real_first.len(), n);
        let block = rv.len() / n;
        let mut shape = rv.shape().to_vec();
        shape[1] *= 2;
        let mut data = Vec::with_capacity(2 * rv.len());
        for (bi, &rf) in real_first.iter().enumerate() {
            let r = &sl(rv)[bi * block..(bi + 1) * block];
            let f = &sl(fv)[bi * block..(bi + 1) * block];
            let (a, b) = if rf { (r, f) } else { (f, r) };
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
        self.push(
            out,
            Op::PairConcat {
                real,
                fake,
                real_first,
            },
            &[real, fake],
        )
    }

    /// `[n, c, ...] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner = xv.len() / (n * c);
        let inv = S::one() / S::lit(inner as f64);
        let data: Vec<S> = sl(xv)
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c]), data).unwrap();
        self.push(out, Op::GlobalAvgPool(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[a.0].value;
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape size");
        let out = ArrayD::from_shape_vec(IxDyn(shape), sl(xv).to_vec()).unwrap();
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Batched matrix product of rank-3 tensors with optional transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let batch = av.shape()[0];
        assert_eq!(bv.shape()[0], batch);
        let (m, k) = if ta {
            (av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[1], av.shape()[2])
        };
        let (k2, n) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(k, k2, "bmm inner dimension");
        let mut out = zeros::<S>(&[batch, m, n]);
        let (as_, bs) = (sl(av), sl(bv));
        let os = sl_mut(&mut out);
        for i in 0..batch {
            gemm(
                ta,
                tb,
                m,
                n,
                k,
                S::one(),
                &as_[i * m * k..(i + 1) * m * k],
                &bs[i * k * n..(i + 1) * k * n],
                S::zero(),
                &mut os[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let last = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in sl_mut(&mut out).chunks_mut(last) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let v = self.unary(a, |x| x.max(lo).min(hi));
        self.push(v, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = S::lit(va.len() as f64);
        let s: S = sl(va)
            .iter()
            .zip(sl(vb))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s / n);
        self.push(out, Op::Mse(a, b), &[a, b])
    }

    /// Mean binary cross-entropy of probabilities `p` against labels `y`,
    /// with `p` clamped to `[eps, 1 - eps]`. Clamped entries pass no gradient.
    pub fn bce(&mut self, p: Var, y: Vec<S>, eps: S) -> Var {
        let pv = &self.nodes[p.0].value;
        assert_eq!(pv.len(), y.len(), "bce length mismatch");
        let l = bce_value(sl(pv), &y, eps);
        let out = ArrayD::from_elem(IxDyn(&[]), l);
        self.push(out, Op::Bce { p, y, eps }, &[p])
    }

    /// Mean over elements of `KL(N(mu, e^logvar) ‖ N(0, 1))` terms.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Var {
        let (mv, lv) = (&self.nodes[mu.0].value, &self.nodes[logvar.0].value);
        assert_eq!(mv.shape(), lv.shape());
        let n = S::lit(mv.len() as f64);
        let half = S::lit(0.5);
        let s: S = sl(mv)
            .iter()
            .zip(sl(lv))
            .map(|(&m, &l)| half * (m * m + l.exp() - S::one() - l))
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s / n);
        self.push(out, Op::KlNormal { mu, logvar }, &[mu, logvar])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let m = sl(xv).iter().copied().sum::<S>() / S::lit(xv.len() as f64);
        let out = ArrayD::from_elem(IxDyn(&[]), m);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), S::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<S>>], v: Var, g: ArrayD<S>) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(existing) => {
                sl_mut(existing)
                    .iter_mut()
                    .zip(sl(&g))
                    .for_each(|(e, &d)| *e = *e + d);
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g * &self.nodes[b.0].value;
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g * &self.nodes[a.0].value;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.mapv(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let bshape = self.nodes[bias.0].value.shape().to_vec();
                    let inner = g.len() / (bshape[0] * bshape[1]);
                    let data: Vec<S> = sl(g).chunks(inner).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, ArrayD::from_shape_vec(IxDyn(&bshape), data).unwrap());
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(g, *x, *w, *b, *geom, grads),
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = zeros::<S>(&[n, din]);
                    gemm(false, false, n, din, dout, S::one(), sl(g), sl(wv), S::zero(), sl_mut(&mut dx));
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = zeros::<S>(&[dout, din]);
                    gemm(true, false, dout, din, n, S::one(), sl(g), sl(xv), S::zero(), sl_mut(&mut dw));
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![S::zero(); dout];
                        for row in sl(g).chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
                        }
                        self.accumulate(grads, *b, ArrayD::from_shape_vec(IxDyn(&[dout]), db).unwrap());
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(g, *x, *gamma, *beta, *groups, stats, grads),
            Op::Silu(a) => {
                let xv = &self.nodes[a.0].value;
                let data: Vec<S> = sl(xv)
                    .iter()
                    .zip(sl(g))
                    .map(|(&x, &d)| {
                        let s = sigmoid(x);
                        d * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, ArrayD::from_shape_vec(xv.raw_dim(), data).unwrap());
            }
            Op::LeakyRelu(a, slope) => {
                let xv = &self.nodes[a.0].value;
                let data: Vec<S> = sl(xv)
                    .iter()
                    .zip(sl(g))
                    .map(|(&x, &d)| if x > S::zero() { d } else { d * *slope })
                    .collect();
                self.accumulate(grads, *a, ArrayD::from_shape_vec(xv.raw_dim(), data).unwrap());
            }
            Op::Sigmoid(a) => {
                let data: Vec<S> = sl(out)
                    .iter()
                    .zip(sl(g))
                    .map(|(&s, &d)| d * s * (S::one() - s))
                    .collect();
                self.accumulate(grads, *a, ArrayD::from_shape_vec(out.raw_dim(), data).unwrap());
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * out),
            Op::Upsample2x(a) => {
                let (n, c, h, w) = dims4(self.nodes[a.0].value.shape());
                let mut dx = zeros::<S>(&[n, c, h, w]);
                let gs = sl(g);
                let ds = sl_mut(&mut dx);
                for p in 0..n * c {
                    let src = &gs[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut ds[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let t = &mut dst[(y / 2) * w + x / 2];
                            *t = *t + src[y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SpaceToDepth(a, r) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (n, c, h, w) = dims4(&shape);
                let mut dx = zeros::<S>(&shape);
                shuffle(sl(g), sl_mut(&mut dx), n, c, h, w, *r, false);
                self.accumulate(grads, *a, dx);
            }
            Op::DepthToSpace(a, r) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (n, c, h, w) = dims4(g.shape());
                let mut dx = zeros::<S>(&shape);
                shuffle(sl(g), sl_mut(&mut dx), n, c, h, w, *r, true);
                self.accumulate(grads, *a, dx);
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let total_block = g.len() / n;
                let mut offset = 0;
                for p in parts {
                    let shape = self.nodes[p.0].value.shape().to_vec();
                    let block = shape.iter().skip(1).product::<usize>();
                    if self.needs(*p) {
                        let mut data = Vec::with_capacity(n * block);
                        for bi in 0..n {
                            let start = bi * total_block + offset;
                            data.extend_from_slice(&sl(g)[start..start + block]);
                        }
                        self.accumulate(grads, *p, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
                    }
                    offset += block;
                }
            }
            Op::PairConcat {
                real,
                fake,
                real_first,
            } => {
                let shape = self.nodes[real.0].value.shape().to_vec();
                let n = shape[0];
                let block = shape.iter().skip(1).product::<usize>();
                let mut dr = Vec::with_capacity(n * block);
                let mut df = Vec::with_capacity(n * block);
                for (bi, &rf) in real_first.iter().enumerate() {
                    let first = &sl(g)[2 * bi * block..(2 * bi + 1) * block];
                    let second = &sl(g)[(2 * bi + 1) * block..(2 * bi + 2) * block];
                    let (r, f) = if rf { (first, second) } else { (second, first) };
                    dr.extend_from_slice(r);
                    df.extend_from_slice(f);
                }
                self.accumulate(grads, *real, ArrayD::from_shape_vec(IxDyn(&shape), dr).unwrap());
                self.accumulate(grads, *fake, ArrayD::from_shape_vec(IxDyn(&shape), df).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let xv = &self.nodes[a.0].value;
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let inner = xv.len() / (n * c);
                let inv = S::one() / S::lit(inner as f64);
                let mut dx = zeros::<S>(xv.shape());
                for (chunk, &d) in sl_mut(&mut dx).chunks_mut(inner).zip(sl(g)) {
                    chunk.fill(d * inv);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape();
                self.accumulate(grads, *a, ArrayD::from_shape_vec(IxDyn(shape), sl(g).to_vec()).unwrap());
            }
            Op::Bmm { a, b, ta, tb } => self.bmm_backward(g, *a, *b, *ta, *tb, grads),
            Op::Softmax(a) => {
                let last = *out.shape().last().unwrap();
                let mut dx = out.clone();
                for (yrow, grow) in sl_mut(&mut dx).chunks_mut(last).zip(sl(g).chunks(last)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&y, &d)| y * d).sum();
                    yrow.iter_mut().zip(grow).for_each(|(y, &d)| *y = *y * (d - dot));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let data: Vec<S> = sl(xv)
                    .iter()
                    .zip(sl(g))
                    .map(|(&v, &d)| if v >= *lo && v <= *hi { d } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, ArrayD::from_shape_vec(xv.raw_dim(), data).unwrap());
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let scale = sl(g)[0] * S::lit(2.0) / S::lit(va.len() as f64);
                let diff: Vec<S> = sl(va).iter().zip(sl(vb)).map(|(&x, &y)| (x - y) * scale).collect();
                let da = ArrayD::from_shape_vec(va.raw_dim(), diff).unwrap();
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.mapv(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Bce { p, y, eps } => {
                let pv = &self.nodes[p.0].value;
                let n = S::lit(y.len() as f64);
                let up = sl(g)[0];
                let hi = S::one() - *eps;
                let data: Vec<S> = sl(pv)
                    .iter()
                    .zip(y)
                    .map(|(&pp, &yy)| {
                        if pp < *eps || pp > hi {
                            S::zero()
                        } else {
                            -up * (yy / pp - (S::one() - yy) / (S::one() - pp)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, ArrayD::from_shape_vec(pv.raw_dim(), data).unwrap());
            }
            Op::KlNormal { mu, logvar } => {
                let (mv, lv) = (&self.nodes[mu.0].value, &self.nodes[logvar.0].value);
                let scale = sl(g)[0] / S::lit(mv.len() as f64);
                self.accumulate(grads, *mu, mv.mapv(|m| m * scale));
                let half = S::lit(0.5);
                self.accumulate(grads, *logvar, lv.mapv(|l| half * (l.exp() - S::one()) * scale));
            }
            Op::Mean(a) => {
                let xv = &self.nodes[a.0].value;
                let d = sl(g)[0] / S::lit(xv.len() as f64);
                self.accumulate(grads, *a, ArrayD::from_elem(xv.raw_dim(), d));
            }
        }
    }

    fn conv2d_backward(
        &self,
        g: &ArrayD<S>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        grads: &mut [Option<ArrayD<S>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (n, c, h, wd) = dims4(xv.shape());
        let oc = wv.shape()[0];
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let plane = oh * ow;
        let kdim = c * geom.kernel * geom.kernel;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let gs = sl(g);
        let xs = sl(xv);
        let ws = sl(wv);
        let mut dw = if need_w { Some(zeros::<S>(wv.shape())) } else { None };
        let mut dx = if need_x { Some(zeros::<S>(xv.shape())) } else { None };
        let mut cols = vec![S::zero(); if geom.is_pointwise() { 0 } else { kdim * plane }];
        let mut dcols = vec![S::zero(); if need_x && !geom.is_pointwise() { kdim * plane } else { 0 }];
        for bi in 0..n {
            let gn = &gs[bi * oc * plane..(bi + 1) * oc * plane];
            if let Some(dw) = dw.as_mut() {
                let xn = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
                let colm: &[S] = if geom.is_pointwise() {
                    xn
                } else {
                    im2col(xn, c, h, wd, geom, oh, ow, &mut cols);
                    &cols
                };
                gemm(false, true, oc, kdim, plane, S::one(), gn, colm, S::one(), sl_mut(dw));
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut sl_mut(dx)[bi * c * h * wd..(bi + 1) * c * h * wd];
                if geom.is_pointwise() {
                    gemm(true, false, kdim, plane, oc, S::one(), ws, gn, S::zero(), dxn);
                } else {
                    gemm(true, false, kdim, plane, oc, S::one(), ws, gn, S::zero(), &mut dcols);
                    col2im(&dcols, c, h, wd, geom, oh, ow, dxn);
                }
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![S::zero(); oc];
                for (i, chunk) in gs.chunks(plane).enumerate() {
                    db[i % oc] = db[i % oc] + chunk.iter().copied().sum::<S>();
                }
                self.accumulate(grads, b, ArrayD::from_shape_vec(IxDyn(&[oc]), db).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        g: &ArrayD<S>,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(S, S)],
        grads: &mut [Option<ArrayD<S>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let gv = sl(&self.nodes[gamma.0].value);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner = xv.len() / (n * c);
        let cpg = c / groups;
        let m = cpg * inner;
        let inv_m = S::one() / S::lit(m as f64);
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let mut dx = zeros::<S>(xv.shape());
        let xs = sl(xv);
        let gs = sl(g);
        let dxs = sl_mut(&mut dx);
        for gi in 0..n * groups {
            let (mean, rstd) = stats[gi];
            let g0 = (gi % groups) * cpg;
            let xr = &xs[gi * m..(gi + 1) * m];
            let gr = &gs[gi * m..(gi + 1) * m];
            // sums of dxhat and dxhat * xhat over the group
            let mut s1 = S::zero();
            let mut s2 = S::zero();
            for ci in 0..cpg {
                let ch = g0 + ci;
                for j in ci * inner..(ci + 1) * inner {
                    let xhat = (xr[j] - mean) * rstd;
                    dgamma[ch] = dgamma[ch] + gr[j] * xhat;
                    dbeta[ch] = dbeta[ch] + gr[j];
                    let dxhat = gr[j] * gv[ch];
                    s1 = s1 + dxhat;
                    s2 = s2 + dxhat * xhat;
                }
            }
            let (m1, m2) = (s1 * inv_m, s2 * inv_m);
            let dr = &mut dxs[gi * m..(gi + 1) * m];
            for ci in 0..cpg {
                let ga = gv[g0 + ci];
                for j in ci * inner..(ci + 1) * inner {
                    let xhat = (xr[j] - mean) * rstd;
                    dr[j] = rstd * (gr[j] * ga - m1 - xhat * m2);
                }
            }
        }
        self.accumulate(grads, x, dx);
        self.accumulate(grads, gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
        self.accumulate(grads, beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
    }

    fn bmm_backward(&self, g: &ArrayD<S>, a: Var, b: Var, ta: bool, tb: bool, grads: &mut [Option<ArrayD<S>>]) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let batch = av.shape()[0];
        let (m, n) = (g.shape()[1], g.shape()[2]);
        let k = if ta { av.shape()[1] } else { av.shape()[2] };
        let (as_, bs, gs) = (sl(av), sl(bv), sl(g));
        if self.needs(a) {
            let mut da = zeros::<S>(av.shape());
            let das = sl_mut(&mut da);
            for i in 0..batch {
                let gi = &gs[i * m * n..(i + 1) * m * n];
                let bi = &bs[i * k * n..(i + 1) * k * n];
                let di = &mut das[i * m * k..(i + 1) * m * k];
                if ta {
                    // dA (k x m) = op(B) · dC^T
                    gemm(tb, true, k, m, n, S::one(), bi, gi, S::zero(), di);
                } else {
                    // dA (m x k) = dC · op(B)^T
                    gemm(false, !tb, m, k, n, S::one(), gi, bi, S::zero(), di);
                }
            }
            self.accumulate(grads, a, da);
        }
        if self.needs(b) {
            let mut db = zeros::<S>(bv.shape());
            let dbs = sl_mut(&mut db);
            for i in 0..batch {
                let gi = &gs[i * m * n..(i + 1) * m * n];
                let ai = &as_[i * m * k..(i + 1) * m * k];
                let di = &mut dbs[i * k * n..(i + 1) * k * n];
                if tb {
                    // dB (n x k) = dC^T · op(A)
                    gemm(true, ta, n, k, m, S::one(), gi, ai, S::zero(), di);
                } else {
                    // dB (k x n) = op(A)^T · dC
                    gemm(!ta, false, k, n, m, S::one(), ai, gi, S::zero(), di);
                }
            }
            self.accumulate(grads, b, db);
        }
    }
}

/// Moves pixels between the spatial `[n, c, h, w]` layout and the
/// depth layout `[n, c*r*r, h/r, w/r]`. `to_depth` selects the direction.
#[allow(clippy::too_many_arguments)]
fn shuffle<S: Copy>(src: &[S], dst: &mut [S], n: usize, c: usize, h: usize, w: usize, r: usize, to_depth: bool) {
    let (hs, ws) = (h / r, w / r);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let spatial = ((b * c + ch) * h + y) * w + x;
                    let dc = ch * r * r + (y % r) * r + (x % r);
                    let depth = ((b * c * r * r + dc) * hs + y / r) * ws + x / r;
                    if to_depth {
                        dst[depth] = src[spatial];
                    } else {
                        dst[spatial] = src[depth];
                    }
                }
            }
        }
    }
}

/// Clamped mean BCE on plain slices; shared by the graph op and the
/// standalone loss functions.
pub(crate) fn bce_value<S: Scalar>(p: &[S], y: &[S], eps: S) -> S {
    let n = S::lit(p.len() as f64);
    let hi = S::one() - eps;
    let total: S = p
        .iter()
        .zip(y)
        .map(|(&pp, &yy)| {
            let pc = pp.max(eps).min(hi);
            -(yy * pc.ln() + (S::one() - yy) * (S::one() - pc).ln())
        })
        .sum();
    total / n
}
