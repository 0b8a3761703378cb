//! Adam, heavy-ball momentum and SGD with a triangular cyclic learning rate.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MOMENTUM: f64 = 0.9;
/// Length of one triangular learning-rate cycle, in epochs.
pub const CYCLE_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { lr: f64 },
    Momentum { lr: f64 },
    SgdCyclic { lr_min: f64, lr_max: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { lr: 1e-3 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("optimizer.{name} must be positive, got {v}"))
            }
        };
        match *self {
            OptimizerConfig::Adam { lr } | OptimizerConfig::Momentum { lr } => pos("lr", lr),
            OptimizerConfig::SgdCyclic { lr_min, lr_max } => {
                pos("lr_min", lr_min)?;
                pos("lr_max", lr_max)?;
                if lr_min >= lr_max {
                    return Err(format!("optimizer.lr_min ({lr_min}) must be below lr_max ({lr_max})"));
                }
                Ok(())
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            OptimizerConfig::Adam { lr } => format!("adam:{lr}"),
            OptimizerConfig::Momentum { lr } => format!("momentum:{lr}"),
            OptimizerConfig::SgdCyclic { lr_min, lr_max } => format!("sgd_cyclic:[{lr_min},{lr_max}]"),
        }
    }
}

/// Triangular schedule: `lr_min` at the start of each cycle, `lr_max` halfway.
pub fn cyclic_lr(lr_min: f64, lr_max: f64, step: usize, cycle_steps: usize) -> f64 {
    let pos = (step % cycle_steps) as f64 / cycle_steps as f64;
    lr_min + (lr_max - lr_min) * (1.0 - (2.0 * pos - 1.0).abs())
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    cycle_steps: usize,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: usize,
}

fn check(params: &[Tensor], grads: &[Option<Vec<f32>>]) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::MissingGradient(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        match g {
            None if p.requires_grad => return Err(TrainError::MissingGradient(format!("parameter #{i}"))),
            Some(g) if g.len() != p.len() => {
                return Err(TrainError::MissingGradient(format!("parameter #{i} has {} gradient entries for {}", g.len(), p.len())))
            }
            _ => {}
        }
    }
    Ok(())
}

impl Optimizer {
    /// `steps_per_epoch` sets the cyclic schedule's period.
    pub fn new(config: OptimizerConfig, params: &[Tensor], steps_per_epoch: usize) -> Self {
        let zeros = |t: &Tensor| vec![0.0f32; if t.requires_grad { t.len() } else { 0 }];
        Self {
            config,
            cycle_steps: (CYCLE_EPOCHS * steps_per_epoch).max(1),
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Learning rate the next call to `step` will use.
    pub fn current_lr(&self) -> f64 {
        match self.config {
            OptimizerConfig::Adam { lr } | OptimizerConfig::Momentum { lr } => lr,
            OptimizerConfig::SgdCyclic { lr_min, lr_max } => cyclic_lr(lr_min, lr_max, self.steps, self.cycle_steps),
        }
    }

    /// Updates every trainable tensor in place. Non-trainable tensors are
    /// left alone and may have `None` gradients.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f32>>]) -> Result<(), TrainError> {
        check(params, grads)?;
        let lr = self.current_lr();
        self.steps += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (true, Some(g)) = (p.requires_grad, g) else { continue };
            match self.config {
                OptimizerConfig::Adam { .. } => adam_step(p.data_mut(), g, &mut self.first[i], &mut self.second[i], self.steps, lr),
                OptimizerConfig::Momentum { .. } => momentum_step(p.data_mut(), g, &mut self.first[i], lr),
                OptimizerConfig::SgdCyclic { .. } => sgd_step(p.data_mut(), g, lr),
            }
        }
        Ok(())
    }
}

/// One Adam update with bias correction; `t` counts from 1.
pub fn adam_step(w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: usize, lr: f64) {
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let step = (lr * c2.sqrt() / c1) as f32;
    let eps = (ADAM_EPS * c2.sqrt()) as f32;
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        w[i] -= step * m[i] / (v[i].sqrt() + eps);
    }
}

/// `v ← μ·v + g; w ← w − lr·v`.
pub fn momentum_step(w: &mut [f32], g: &[f32], velocity: &mut [f32], lr: f64) {
    let (mu, lr) = (MOMENTUM as f32, lr as f32);
    for i in 0..w.len() {
        velocity[i] = mu * velocity[i] + g[i];
        w[i] -= lr * velocity[i];
    }
}

pub fn sgd_step(w: &mut [f32], g: &[f32], lr: f64) {
    let lr = lr as f32;
    for (w, g) in w.iter_mut().zip(g) {
        *w -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_square() {
        let (mut w, mut m, mut v) = ([1.0f32], [0.0f32], [0.0f32]);
        let mut hit = None;
        for t in 1..=500 {
            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut m, &mut v, t, 0.1);
            if w[0].abs() < 1e-2 && hit.is_none() {
                hit = Some(t);
            }
        }
        assert!(hit.is_some(), "final w = {}", w[0]);
        assert!(w[0].abs() < 1e-2);
    }

    #[test]
    fn cyclic_endpoints() {
        assert_eq!(cyclic_lr(7e-3, 5e-2, 0, 100), 7e-3);
        assert!((cyclic_lr(7e-3, 5e-2, 50, 100) - 5e-2).abs() < 1e-15);
        assert_eq!(cyclic_lr(7e-3, 5e-2, 100, 100), 7e-3);
        assert!(cyclic_lr(7e-3, 5e-2, 25, 100) > 7e-3);
    }

    #[test]
    fn momentum_zero_gradient_is_noop() {
        let mut params = vec![Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().with_grad()];
        let before = params.clone();
        let mut opt = Optimizer::new(OptimizerConfig::Momentum { lr: 1e-3 }, &params, 10);
        for _ in 0..5 {
            opt.step(&mut params, &[Some(vec![0.0; 3])]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![Tensor::new(&[2], vec![0.0, 0.0]).unwrap().with_grad()];
        let mut opt = Optimizer::new(OptimizerConfig::default(), &params, 1);
        assert!(matches!(opt.step(&mut params, &[None]), Err(TrainError::MissingGradient(_))));
        let mut frozen = vec![Tensor::new(&[2], vec![0.0, 0.0]).unwrap()];
        opt.step(&mut frozen, &[None]).unwrap();
    }

    #[test]
    fn validation() {
        assert!(OptimizerConfig::SgdCyclic { lr_min: 5e-2, lr_max: 7e-3 }.validate().is_err());
        assert!(OptimizerConfig::Adam { lr: 0.0 }.validate().is_err());
        OptimizerConfig::SgdCyclic { lr_min: 7e-3, lr_max: 5e-2 }.validate().unwrap();
    }

    #[test]
    fn serde_shape() {
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind":"sgd_cyclic","lr_min":0.007,"lr_max":0.05}"#).unwrap();
        assert_eq!(c, OptimizerConfig::SgdCyclic { lr_min: 0.007, lr_max: 0.05 });
    }
}
