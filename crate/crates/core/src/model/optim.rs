use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::Parameters;

use super::config::ModelConfig;
use super::network::{loss_and_grads, IetParams};

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: ModelConfig,
    pub params: IetParams,
    pub m: IetParams,
    pub v: IetParams,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Adam,
}

impl TrainState {
    pub fn new(config: ModelConfig, seed: u64, optimizer: Adam) -> Result<Self> {
        let params = IetParams::init(&config, seed)?;
        let m = params.zeroed();
        let v = params.zeroed();
        Ok(Self { config, params, m, v, step: 0, seed, optimizer })
    }

    /// Applies one update from `grads`.
    pub fn apply(&mut self, grads: &IetParams) -> Result<()> {
        let mut bad = None;
        grads.visit("", &mut |name, g| {
            if bad.is_none() && g.data().iter().any(|v| !v.is_finite()) {
                bad = Some(name);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step += 1;
        let Adam { lr, beta1, beta2, eps } = self.optimizer;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let g: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.m.visit_mut("", &mut |_, m| {
            m.data_mut().iter_mut().zip(g[i].data()).for_each(|(m, &g)| *m = beta1 * *m + (1.0 - beta1) * g);
            i += 1;
        });
        let mut i = 0;
        self.v.visit_mut("", &mut |_, v| {
            v.data_mut().iter_mut().zip(g[i].data()).for_each(|(v, &g)| *v = beta2 * *v + (1.0 - beta2) * g * g);
            i += 1;
        });
        let ms: Vec<&Tensor> = self.m.named().into_iter().map(|(_, t)| t).collect();
        let vs: Vec<&Tensor> = self.v.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.params.visit_mut("", &mut |_, p| {
            for ((p, m), v) in p.data_mut().iter_mut().zip(ms[i].data()).zip(vs[i].data()) {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }

    /// One optimisation step on a single `(lr, hr)` pair; returns the loss.
    pub fn train_step(&mut self, lr: &Tensor, hr: &Tensor) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.config, &self.params, lr, hr, self.config.dilation_train)?;
        self.apply(&grads)?;
        Ok(loss)
    }
}
