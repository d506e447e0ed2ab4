use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// One optimizer over a fixed, ordered list of parameter tensors.
///
/// Weight decay is classical L2: `wd·θ` is added to the gradient before the
/// update rule runs.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len() {
            return Err(Error::Contract("parameter list changed between steps".into()));
        }
        self.t += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                let first_step = self.t == 1;
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((theta, &gi), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                        let gi = gi + wd * *theta;
                        *b = if first_step { gi } else { SGD_MOMENTUM * *b + gi };
                        *theta -= lr * *b;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((theta, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gi = gi + wd * *theta;
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn run(kind: OptimizerKind, lr: f64, wd: f64, grads: &[f64]) -> f64 {
        let mut theta = Tensor::scalar(1.0);
        let mut opt = Optimizer::new(kind, lr, wd);
        for &g in grads {
            opt.step(&mut [&mut theta], &[vec![g]]).unwrap();
        }
        theta.data()[0]
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        assert_eq!(run(OptimizerKind::Adam, 0.0, 0.0, &[1.0, -2.0]), 1.0);
        assert_eq!(run(OptimizerKind::Sgd, 0.0, 0.1, &[1.0, -2.0]), 1.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let theta = run(OptimizerKind::Adam, 0.01, 0.0, &[1.0]);
        assert_abs_diff_eq!(theta, 1.0 - 0.01 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        // buf = 1 → θ = 0.9; buf = 0.9·1 + 1 = 1.9 → θ = 0.71
        assert_abs_diff_eq!(run(OptimizerKind::Sgd, 0.1, 0.0, &[1.0, 1.0]), 0.71, epsilon = 1e-15);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        // g + wd·θ = 0 + 0.5·1
        assert_abs_diff_eq!(run(OptimizerKind::Sgd, 0.1, 0.5, &[0.0]), 0.95, epsilon = 1e-15);
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let mut theta = Tensor::scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 0.0);
        assert!(opt.step(&mut [&mut theta], &[]).is_err());
    }
}
