//! Parameter storage, a forward-pass context, and the handful of layers the
//! networks are built from.

use std::collections::BTreeMap;

use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters, ordered by name so every traversal is deterministic.
///
/// Names are slash-separated paths (`unet/down0/conv1/w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars in trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy every entry of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) && !is_buffer(k) {
                p.trainable = trainable;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Batch statistics observed by a batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnStat {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// One forward pass: the tape plus lazily bound parameters.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    grad_filter: Option<Box<dyn Fn(&str) -> bool + 'a>>,
    pub train: bool,
    pub bn_stats: Vec<BnStat>,
}

impl<'a> Ctx<'a> {
    /// Context in which every trainable parameter receives a gradient.
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            grad_filter: None,
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Inference context: batch norm uses running statistics, nothing is differentiated.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut c = Self::new(store, false);
        c.grad_filter = Some(Box::new(|_| false));
        c
    }

    /// Only trainable parameters accepted by `filter` receive gradients.
    pub fn with_filter(store: &'a ParamStore, train: bool, filter: impl Fn(&str) -> bool + 'a) -> Self {
        let mut c = Self::new(store, train);
        c.grad_filter = Some(Box::new(filter));
        c
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Bind a named parameter onto the tape (once per pass).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let param = self
            .store
            .param(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not initialized"));
        let wants = param.trainable && self.grad_filter.as_ref().is_none_or(|f| f(name));
        let v = if wants {
            self.g.param(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Gradients of every bound, differentiable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, v)| self.g.requires_grad(**v))
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Apply running-statistics updates gathered during a training pass.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[BnStat], momentum: f64) {
    for s in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let key = format!("{}/{}", s.name, suffix);
            if let Some(t) = store.get_mut(&key) {
                for (r, b) in t.iter_mut().zip(batch.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("std must be positive");
    Tensor::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias: true,
        }
    }

    /// Set the weights (and bias) already in `store` to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for suffix in ["w", "b"] {
            if let Some(t) = store.get_mut(&format!("{}/{suffix}", self.name)) {
                t.fill(0.0);
            }
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let bound = (1.0 / self.din as f64).sqrt();
        store.insert(
            format!("{}/w", self.name),
            uniform_tensor(rng, &[self.din, self.dout], bound),
            true,
        );
        if self.bias {
            store.insert(
                format!("{}/b", self.name),
                Tensor::zeros(IxDyn(&[self.dout])),
                true,
            );
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let shape = ctx.g.shape(x).to_vec();
        let last = *shape.last().unwrap();
        assert_eq!(last, self.din, "{}: input dim", self.name);
        let rows = shape.iter().product::<usize>() / last;
        let flat = ctx.g.reshape(x, &[rows, last]);
        let w = ctx.p(&format!("{}/w", self.name));
        let mut y = ctx.g.matmul(flat, w);
        if self.bias {
            let b = ctx.p(&format!("{}/b", self.name));
            y = ctx.g.add(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.dout;
        ctx.g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = p;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.init_scaled(store, rng, 1.0);
    }

    /// He-normal init multiplied by `gain`; `gain == 0` gives a zero conv.
    pub fn init_scaled(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, gain: f64) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let shape = [self.cout, self.cin, self.k, self.k];
        let w = if gain == 0.0 {
            Tensor::zeros(IxDyn(&shape))
        } else {
            normal_tensor(rng, &shape, gain * (2.0 / fan_in).sqrt())
        };
        store.insert(format!("{}/w", self.name), w, true);
        store.insert(
            format!("{}/b", self.name),
            Tensor::zeros(IxDyn(&[1, self.cout, 1, 1])),
            true,
        );
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(&format!("{}/w", self.name));
        let b = ctx.p(&format!("{}/b", self.name));
        let y = ctx.g.conv2d(x, w, self.stride, self.pad);
        ctx.g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}/gamma", self.name), Tensor::ones(IxDyn(&[self.dim])), true);
        store.insert(format!("{}/beta", self.name), Tensor::zeros(IxDyn(&[self.dim])), true);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let n = ctx.g.layer_norm(x, 1e-5);
        let gamma = ctx.p(&format!("{}/gamma", self.name));
        let beta = ctx.p(&format!("{}/beta", self.name));
        let y = ctx.g.mul(n, gamma);
        ctx.g.add(y, beta)
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `(N, C, H, W)` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            ch,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let shape = [1, self.ch, 1, 1];
        store.insert(format!("{}/gamma", self.name), Tensor::ones(IxDyn(&shape)), true);
        store.insert(format!("{}/beta", self.name), Tensor::zeros(IxDyn(&shape)), true);
        store.insert(format!("{}/running_mean", self.name), Tensor::zeros(IxDyn(&shape)), false);
        store.insert(format!("{}/running_var", self.name), Tensor::ones(IxDyn(&shape)), false);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let normed = if ctx.train {
            let (mean, var) = channel_stats(ctx.g.value(x));
            ctx.bn_stats.push(BnStat {
                name: self.name.clone(),
                mean,
                var,
            });
            ctx.g.batch_norm(x, BN_EPS)
        } else {
            let rm = ctx.p(&format!("{}/running_mean", self.name));
            let rv = ctx.p(&format!("{}/running_var", self.name));
            let inv = ctx.g.value(rv).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let inv = ctx.g.constant(inv);
            let centered = ctx.g.sub(x, rm);
            ctx.g.mul(centered, inv)
        };
        let gamma = ctx.p(&format!("{}/gamma", self.name));
        let beta = ctx.p(&format!("{}/beta", self.name));
        let y = ctx.g.mul(normed, gamma);
        ctx.g.add(y, beta)
    }
}

/// Per-channel mean and (biased) variance of an `(N, C, H, W)` tensor.
fn channel_stats(x: &Tensor) -> (Array1<f64>, Array1<f64>) {
    let c = x.shape()[1];
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let sub = x.index_axis(ndarray::Axis(1), ch);
        let m = sub.mean().unwrap_or(0.0);
        let v = sub.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / sub.len() as f64;
        mean[ch] = m;
        var[ch] = v;
    }
    (mean, var)
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            fc1: Linear::new(format!("{name}/fc1"), din, hidden),
            fc2: Linear::new(format!("{name}/fc2"), hidden, dout),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.g.gelu(h);
        self.fc2.forward(ctx, h)
    }
}
