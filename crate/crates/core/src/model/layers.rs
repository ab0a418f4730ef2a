//! Named parameters and the small layers the network is assembled from.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{BatchStats, BnMode, Graph, RunningStats, Var};
use crate::tensor::Tensor;

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        Self { name: name.into(), group, value }
    }
}

/// Which parameter groups receive gradients during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Everything,
    GatesOnly,
}

impl Trainable {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::GatesOnly => group == ParamGroup::Gate,
        }
    }
}

/// Copies parameters onto a graph as leaves, once per name, and remembers
/// the resulting handles so gradients can be read back after `backward`.
pub struct ParamBinder {
    trainable: Trainable,
    vars: HashMap<String, Var>,
}

impl ParamBinder {
    pub fn new(trainable: Trainable) -> Self {
        Self { trainable, vars: HashMap::new() }
    }

    pub fn frozen() -> Self {
        Self::new(Trainable::Nothing)
    }

    pub fn bind(&mut self, g: &mut Graph, p: &Param) -> Var {
        if let Some(v) = self.vars.get(&p.name) {
            return *v;
        }
        let mut t = p.value.clone();
        t.requires_grad = self.trainable.includes(p.group);
        let v = g.leaf(t);
        self.vars.insert(p.name.clone(), v);
        v
    }

    /// Routes later binds of `name` to an existing graph value.
    pub fn preset(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Handle of a bound parameter; `None` if the forward pass never used it.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Normal(0, std²) initialization.
pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng)).expect("finite samples")
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound)).expect("finite samples")
}

/// Bias-free square convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal initialized `[out, in, k, k]` kernel with "same" padding.
    pub fn new<R: Rng + ?Sized>(name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let w = normal_tensor(&[out_c, in_c, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self { weight: Param::new(format!("{name}.weight"), ParamGroup::Backbone, w), stride, pad: kernel / 2 }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut ParamBinder, x: Var) -> Result<Var> {
        let w = binder.bind(g, &self.weight);
        Ok(g.conv2d(x, w, self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), ParamGroup::Backbone, Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), ParamGroup::Backbone, Tensor::zeros(&[channels])),
            running: RunningStats::new(channels),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        x: Var,
        mode: BnMode,
        updates: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = binder.bind(g, &self.gamma);
        let beta = binder.bind(g, &self.beta);
        let (y, stats) = g.batch_norm(x, gamma, beta, &self.running, mode)?;
        if let Some(stats) = stats {
            updates.push((self.name.clone(), stats));
        }
        Ok(y)
    }
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, group: ParamGroup, weight: Tensor, bias: Tensor) -> Self {
        Self { weight: Param::new(format!("{name}.weight"), group, weight), bias: Param::new(format!("{name}.bias"), group, bias) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut ParamBinder, x: Var) -> Result<Var> {
        let w = binder.bind(g, &self.weight);
        let b = binder.bind(g, &self.bias);
        Ok(g.affine(x, w, b)?)
    }
}
