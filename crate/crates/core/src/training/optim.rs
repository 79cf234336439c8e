use serde::{Deserialize, Serialize};

use crate::graph::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Momentum SGD with L2 weight decay added to the gradient; the
    /// learning rate is multiplied by `gamma` every `step_epochs` epochs.
    Sgd {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
        #[serde(default = "default_step_epochs")]
        step_epochs: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_step_epochs() -> usize {
    100
}
fn default_gamma() -> f64 {
    0.1
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::Sgd {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            step_epochs: default_step_epochs(),
            gamma: default_gamma(),
        }
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            Self::Adam { lr, .. } => lr,
            Self::Sgd {
                lr,
                step_epochs,
                gamma,
                ..
            } => lr * gamma.powi((epoch / step_epochs.max(1)) as i32),
        }
    }
}

/// Per-parameter optimizer state.
pub struct Optimizer<F> {
    config: OptimizerConfig,
    first: Vec<Option<Vec<F>>>,
    second: Vec<Option<Vec<F>>>,
    steps: u64,
}

impl<F: Float> Optimizer<F> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<F>) -> Self {
        Self {
            config,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters absent from `grads` are left alone.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(ParamId, Tensor<F>)],
        epoch: usize,
    ) {
        self.steps += 1;
        let lr = self.config.lr_at(epoch);
        match self.config {
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => {
                let t = self.steps as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
                let step_size = F::from_f64(lr / bc1);
                let inv_bc2 = F::from_f64(1.0 / bc2);
                let eps = F::from_f64(eps);
                for (id, g) in grads {
                    let m = self.first[id.0].get_or_insert_with(|| vec![F::ZERO; g.numel()]);
                    let v = self.second[id.0].get_or_insert_with(|| vec![F::ZERO; g.numel()]);
                    let p = store.value_mut(*id).data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = b1 * m[j] + (F::ONE - b1) * gj;
                        v[j] = b2 * v[j] + (F::ONE - b2) * gj * gj;
                        p[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd {
                momentum,
                weight_decay,
                ..
            } => {
                let (mu, wd, lr) = (
                    F::from_f64(momentum),
                    F::from_f64(weight_decay),
                    F::from_f64(lr),
                );
                for (id, g) in grads {
                    let buf = self.first[id.0].get_or_insert_with(|| vec![F::ZERO; g.numel()]);
                    let p = store.value_mut(*id).data_mut();
                    for j in 0..p.len() {
                        let d = g.data()[j] + wd * p[j];
                        buf[j] = mu * buf[j] + d;
                        p[j] -= lr * buf[j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.filled("w".into(), vec![3], 2.0, true);
        (s, id)
    }

    #[test]
    fn sgd_zero_gradient_only_decays() {
        let (mut s, id) = store();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &s);
        opt.step(&mut s, &[(id, Tensor::zeros(vec![3]))], 0);
        for &v in s.value(id).data() {
            assert!((v - 2.0 * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_schedule_divides_by_ten() {
        let c = OptimizerConfig::sgd(0.1);
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(99), 0.1);
        assert!((c.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(250) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = store();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001), &s);
        let g = Tensor::from_f64(vec![3], &[0.5, -3.0, 0.0]).unwrap();
        opt.step(&mut s, &[(id, g)], 0);
        let d = s.value(id).data();
        assert!((d[0] - (2.0 - 0.001)).abs() < 1e-9);
        assert!((d[1] - (2.0 + 0.001)).abs() < 1e-9);
        assert_eq!(d[2], 2.0);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = ParamStore::<f64>::new();
        let id = s.filled("w".into(), vec![1], 0.0, true);
        let mut opt = Optimizer::new(
            OptimizerConfig::Sgd {
                lr: 1.0,
                momentum: 0.9,
                weight_decay: 0.0,
                step_epochs: 100,
                gamma: 0.1,
            },
            &s,
        );
        let g = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        opt.step(&mut s, &[(id, g.clone())], 0);
        opt.step(&mut s, &[(id, g)], 0);
        assert!((s.value(id).data()[0] + 2.9).abs() < 1e-12);
    }
}
