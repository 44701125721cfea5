use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, ShapeError, Tensor};

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Tensor<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update in place and advances the step counter.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Tensor<f32>],
        lr: f64,
    ) -> Result<(), ShapeError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(ShapeError::Invalid {
                op: "adam_step",
                reason: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.len() != m.len() {
                return Err(ShapeError::Incompatible {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                // lr·m̂/(√v̂ + ε) with m̂ = m/c1, v̂ = v/c2
                *pi -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
