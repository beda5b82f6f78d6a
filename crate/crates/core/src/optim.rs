//! SGD with momentum and coupled L2 weight decay, and the cosine schedule.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

/// `base_lr · ½ · (1 + cos(π · epoch / total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::invalid("cosine_lr", format!("epoch {epoch} outside 0..={total_epochs}")));
    }
    let progress = epoch as f64 / total_epochs as f64;
    let lr = base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    // cos(π) is not exactly -1 in floating point
    Ok(if epoch == total_epochs { 0.0 } else { lr })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// One update of a single tensor:
/// `g' = g + wd·p;  v ← μ·v + g';  p ← p − lr·v`.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, cfg: SgdConfig, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        ));
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::invalid("sgd_momentum_step", format!("learning rate {lr}")));
    }
    let (mu, wd, lr) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32);
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers for an ordered parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub cfg: SgdConfig,
    velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(cfg: SgdConfig, params: &[&mut Param]) -> Self {
        let velocities = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, velocities }
    }

    /// Update every trainable parameter that holds a gradient, then clear the
    /// gradients. Frozen parameters are never touched, not even by decay.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        if params.len() != self.velocities.len() {
            return Err(Error::shape(
                "OptimizerState::step",
                format!("{} params for {} velocity buffers", params.len(), self.velocities.len()),
            ));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            if !p.trainable {
                continue;
            }
            if let Some(grad) = p.grad.take() {
                sgd_momentum_step(&mut p.value, &grad, v, self.cfg, lr)?;
            }
        }
        Ok(())
    }
}
