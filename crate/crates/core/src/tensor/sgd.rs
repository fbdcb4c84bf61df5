use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum SGD: `v ← μv + g + λθ`, `θ ← θ − ηv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn with_velocity(config: SgdConfig, velocity: Vec<Vec<f64>>) -> Self {
        Sgd { config, velocity }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update with learning rate `lr` (callers handle schedules).
    pub fn step_with_lr(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameters".into(),
            ));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.len() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vel = momentum * *vel + grad + weight_decay * *theta;
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, grads, lr)
    }
}
