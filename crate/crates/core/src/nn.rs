//! Parameters and the small layers the backbone is assembled from.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, RunningStats, Var};
use crate::tensor::Tensor;

/// A learnable tensor plus its gradient slot.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    slot: Option<Var>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            grad: None,
            trainable: true,
            slot: None,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Insert into `g`. Frozen parameters enter as constants.
    pub fn bind(&mut self, g: &mut Graph) -> Result<Var> {
        if self.trainable {
            let v = g.leaf(self.value.clone(), true)?;
            self.slot = Some(v);
            Ok(v)
        } else {
            self.slot = None;
            g.constant(self.value.clone())
        }
    }

    /// Move the gradient computed by `g.backward` into `self.grad`.
    pub fn collect(&mut self, g: &mut Graph) {
        self.grad = self.slot.take().and_then(|v| g.take_grad(v));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named state used by checkpoints: parameters and BN running statistics.
pub type StateDict = HashMap<String, Tensor>;

pub(crate) fn take_state(state: &StateDict, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = state
        .get(name)
        .ok_or_else(|| Error::invalid("load_state", format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::shape(
            "load_state",
            format!("{name}: stored {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(t.clone())
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub stats: RunningStats<f32>,
    pub frozen_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            frozen_stats: false,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let bn_mode = match (mode, self.frozen_stats) {
            (Mode::Eval, _) => BnMode::Eval,
            (Mode::Train, true) => BnMode::TrainFrozenStats,
            (Mode::Train, false) => BnMode::Train,
        };
        let gamma = self.gamma.bind(g)?;
        let beta = self.beta.bind(g)?;
        g.batch_norm(x, gamma, beta, &mut self.stats, bn_mode)
    }

    fn channels(&self) -> usize {
        self.stats.mean.len()
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let c = self.channels();
        out.push((format!("{prefix}.gamma"), self.gamma.value.clone()));
        out.push((format!("{prefix}.beta"), self.beta.value.clone()));
        out.push((format!("{prefix}.running_mean"), Tensor::from_fn(&[c], |i| self.stats.mean[i])));
        out.push((format!("{prefix}.running_var"), Tensor::from_fn(&[c], |i| self.stats.var[i])));
    }

    pub fn load(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        let c = self.channels();
        self.gamma.value = take_state(state, &format!("{prefix}.gamma"), &[c])?;
        self.beta.value = take_state(state, &format!("{prefix}.beta"), &[c])?;
        self.stats.mean = take_state(state, &format!("{prefix}.running_mean"), &[c])?.into_data();
        self.stats.var = take_state(state, &format!("{prefix}.running_var"), &[c])?.into_data();
        Ok(())
    }
}

/// Bias-free convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: Param,
    pub bn: BatchNorm,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    /// He-normal initialization over the fan-in.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| normal.sample(rng));
        Self {
            weight: Param::new(w),
            bn: BatchNorm::new(out_ch),
            stride,
            pad,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let w = self.weight.bind(g)?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        self.bn.forward(g, y, mode)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bn.gamma, &self.bn.beta]
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.value.clone()));
        self.bn.state(&format!("{prefix}.bn"), out);
    }

    pub fn load(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        let shape = self.weight.value.shape().to_vec();
        self.weight.value = take_state(state, &format!("{prefix}.weight"), &shape)?;
        self.bn.load(&format!("{prefix}.bn"), state)
    }
}

/// Zero-mean uniform rows scaled by `1/√in_dim`.
pub fn uniform_rows(rows: usize, in_dim: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (in_dim as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    let w = Tensor::from_fn(&[rows, in_dim], |_| dist.sample(rng));
    let b = Tensor::from_fn(&[rows], |_| dist.sample(rng));
    (w, b)
}
