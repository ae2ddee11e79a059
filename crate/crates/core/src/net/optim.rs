//! Parameter updates: SGD with momentum and Adam, slot state keyed by
//! parameter name so it survives re-borrowing the net between steps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamKind, ParamRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimKind {
    pub fn sgd() -> Self {
        OptimKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f32,
    weight_decay: f32,
    t: u64,
    slots: HashMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        match kind {
            OptimKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::InvalidConfig(format!(
                    "momentum must be in [0, 1), got {momentum}"
                )));
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::InvalidConfig("bad Adam hyperparameters".into()));
                }
            }
            _ => {}
        }
        Ok(Self {
            kind,
            lr,
            weight_decay,
            t: 0,
            slots: HashMap::new(),
        })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Per-epoch learning-rate decay `lr <- factor * lr`.
    pub fn decay_lr(&mut self, factor: f32) {
        self.lr *= factor;
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_>]) {
        self.t += 1;
        for p in params.iter_mut() {
            let len = p.value.len();
            let slot = self.slots.entry(p.name.clone()).or_default();
            if slot.m.len() != len {
                slot.m = vec![0.0; len];
                slot.v = vec![0.0; len];
            }
            // Weight decay applies to multiplicative weights only, never to
            // norm/quantizer parameters or biases.
            let wd = if p.kind == ParamKind::Weight {
                self.weight_decay
            } else {
                0.0
            };
            match self.kind {
                OptimKind::Sgd { momentum } => {
                    for i in 0..len {
                        let g = p.grad[i] + wd * p.value[i];
                        slot.m[i] = momentum * slot.m[i] + g;
                        p.value[i] -= self.lr * slot.m[i];
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    for i in 0..len {
                        let g = p.grad[i] + wd * p.value[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        p.value[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(kind: OptimKind, lr: f32, value: &mut [f32], grad: &mut [f32]) {
        let mut opt = Optimizer::new(kind, lr, 0.0).unwrap();
        let mut params = [ParamRef {
            name: "w".into(),
            kind: ParamKind::Weight,
            value,
            grad,
        }];
        opt.step(&mut params);
    }

    #[test]
    fn zero_momentum_is_vanilla_sgd() {
        let mut value = [1.0f32, -2.0];
        let mut grad = [0.5f32, -1.0];
        step_once(OptimKind::Sgd { momentum: 0.0 }, 0.1, &mut value, &mut grad);
        assert_eq!(value, [1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = Optimizer::new(OptimKind::Sgd { momentum: 0.5 }, 1.0, 0.0).unwrap();
        let mut value = [0.0f32];
        let mut grad = [1.0f32];
        for _ in 0..2 {
            let mut params = [ParamRef {
                name: "w".into(),
                kind: ParamKind::Weight,
                value: &mut value,
                grad: &mut grad,
            }];
            opt.step(&mut params);
        }
        // velocities 1.0 then 1.5
        assert_eq!(value, [-2.5]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut value = [3.0f32, -1.5];
        let mut grad = [0.0f32, 0.0];
        step_once(OptimKind::sgd(), 0.1, &mut value, &mut grad);
        assert_eq!(value, [3.0, -1.5]);

        let mut value = [3.0f32];
        let mut grad = [0.0f32];
        step_once(OptimKind::adam(), 0.1, &mut value, &mut grad);
        assert_eq!(value, [3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut value = [0.0f32, 0.0];
        let mut grad = [0.3f32, -7.0];
        step_once(OptimKind::adam(), 0.01, &mut value, &mut grad);
        assert!((value[0] + 0.01).abs() < 1e-4);
        assert!((value[1] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn weight_decay_only_touches_weights() {
        let mut opt = Optimizer::new(OptimKind::Sgd { momentum: 0.0 }, 0.1, 0.5).unwrap();
        let mut wv = [1.0f32];
        let mut wg = [0.0f32];
        let mut bv = [1.0f32];
        let mut bg = [0.0f32];
        let mut params = [
            ParamRef {
                name: "w".into(),
                kind: ParamKind::Weight,
                value: &mut wv,
                grad: &mut wg,
            },
            ParamRef {
                name: "b".into(),
                kind: ParamKind::BnShift,
                value: &mut bv,
                grad: &mut bg,
            },
        ];
        opt.step(&mut params);
        assert!((wv[0] - 0.95).abs() < 1e-6);
        assert_eq!(bv[0], 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Optimizer::new(OptimKind::sgd(), 0.0, 0.0).is_err());
        assert!(Optimizer::new(OptimKind::Sgd { momentum: 1.0 }, 0.1, 0.0).is_err());
        assert!(Optimizer::new(OptimKind::sgd(), 0.1, -1.0).is_err());
        assert!(
            Optimizer::new(
                OptimKind::Adam {
                    beta1: 1.5,
                    beta2: 0.9,
                    eps: 1e-8
                },
                0.1,
                0.0
            )
            .is_err()
        );
    }
}
