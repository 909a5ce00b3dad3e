use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Gradients, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (with bias correction) or plain SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Learning-rate multiplier for [`ParamGroup::Kernel`] parameters.
    pub kernel_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptimizerState {
    pub fn adam(store: &ParamStore, lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, store, lr)
    }

    pub fn sgd(store: &ParamStore, lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, store, lr)
    }

    pub fn new(kind: OptimizerKind, store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            kind,
            lr,
            kernel_lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for ((_, p), g) in store.iter().zip(grads.iter()) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.value.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (k, (param, g)) in store.iter_mut().zip(grads.iter()).enumerate() {
            let lr = match param.group {
                ParamGroup::Weight => self.lr,
                ParamGroup::Kernel => self.lr * self.kernel_lr_scale,
            };
            let w = param.value.as_mut_slice();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g.as_slice()) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[k].as_mut_slice();
                    let v = self.second[k].as_mut_slice();
                    for i in 0..w.len() {
                        let gi = g.as_slice()[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        w[i] -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
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

    fn one_scalar(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Weight, Matrix::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = one_scalar(1.25);
        let mut opt = OptimizerState::adam(&store, 0.1);
        let g = Gradients::zeros_like(&store);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.value(crate::params::ParamId(0))[(0, 0)], 1.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = one_scalar(0.0);
        let mut opt = OptimizerState::adam(&store, 0.1);
        let g = Gradients::from_vec(alloc::vec![Matrix::scalar(1.0)]);
        opt.step(&mut store, &g).unwrap();
        let w = store.value(crate::params::ParamId(0))[(0, 0)];
        // lr * g / (|g| + eps)
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_step_is_closed_form() {
        let mut store = one_scalar(2.0);
        let mut opt = OptimizerState::sgd(&store, 0.5);
        let g = Gradients::from_vec(alloc::vec![Matrix::scalar(3.0)]);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.value(crate::params::ParamId(0))[(0, 0)], 0.5);
    }

    #[test]
    fn kernel_group_uses_scaled_rate() {
        let mut store = ParamStore::new();
        store.add("k", ParamGroup::Kernel, Matrix::scalar(0.0));
        let mut opt = OptimizerState::sgd(&store, 0.1);
        opt.kernel_lr_scale = 10.0;
        let g = Gradients::from_vec(alloc::vec![Matrix::scalar(1.0)]);
        opt.step(&mut store, &g).unwrap();
        assert!((store.value(crate::params::ParamId(0))[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = one_scalar(0.0);
        let mut opt = OptimizerState::adam(&store, 0.1);
        let g = Gradients::from_vec(alloc::vec![Matrix::scalar(f64::NAN)]);
        assert_eq!(
            opt.step(&mut store, &g),
            Err(Error::NonFiniteGradient("w".into()))
        );
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = one_scalar(0.3);
            let mut opt = OptimizerState::adam(&store, 0.01);
            for k in 0..50 {
                let g = Gradients::from_vec(alloc::vec![Matrix::scalar(libm::sin(k as f64))]);
                opt.step(&mut store, &g).unwrap();
            }
            store.value(crate::params::ParamId(0))[(0, 0)].to_bits()
        };
        assert_eq!(run(), run());
    }
}
