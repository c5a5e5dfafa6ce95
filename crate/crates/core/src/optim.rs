//! First-order optimizers with per-parameter state.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v ← μ·v + g; p ← p − lr·v`.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer hyper-parameters plus moment buffers shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(lr: f64, momentum: f64, params: &[&Tensor<T>]) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn adam(lr: f64, params: &[&Tensor<T>]) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    /// Applies one update. `grads[i]` must match `params[i]` in shape.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TensorError> {
        assert_eq!(params.len(), self.first.len(), "optimizer tracks a different parameter list");
        assert_eq!(params.len(), grads.len());
        for (p, g) in params.iter().zip(grads) {
            p.expect_same_shape(g, "optimizer step")?;
        }
        self.steps += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::of(momentum);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = mu * *vv + gv;
                        *pv = *pv - lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - T::of(beta1.powi(self.steps as i32));
                let c2 = T::one() - T::of(beta2.powi(self.steps as i32));
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 towards zero at `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`; returns the norm
/// before rescaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }
    norm
}
