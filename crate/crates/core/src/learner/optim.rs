//! RMSprop over the kernel parameters.

use crate::kernel::{KernelGrad, QDppKernel};

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
    sq_d: Vec<f64>,
    sq_b: Vec<f64>,
}

impl RmsProp {
    pub fn new(kernel: &QDppKernel, learning_rate: f64, alpha: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            alpha,
            eps,
            sq_d: vec![0.0; kernel.log_quality().len()],
            sq_b: vec![0.0; kernel.diversity().len()],
        }
    }

    /// `v ← αv + (1−α)g²; θ ← θ − lr·g / (√v + eps)`, then the unit-ball projection.
    pub fn step(&mut self, kernel: &mut QDppKernel, grad: &KernelGrad) {
        let (d, b) = kernel.params_mut();
        update(d, &mut self.sq_d, &grad.log_quality, self.learning_rate, self.alpha, self.eps);
        update(b, &mut self.sq_b, &grad.diversity, self.learning_rate, self.alpha, self.eps);
        kernel.project_to_unit_ball();
    }
}

#[inline]
fn update(theta: &mut [f64], sq: &mut [f64], g: &[f64], lr: f64, alpha: f64, eps: f64) {
    for ((t, v), &g) in theta.iter_mut().zip(sq.iter_mut()).zip(g) {
        *v = alpha * *v + (1.0 - alpha) * g * g;
        if g != 0.0 {
            *t -= lr * g / (v.sqrt() + eps);
        }
    }
}
