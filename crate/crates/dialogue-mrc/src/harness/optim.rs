//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip applied to all gradients jointly before the update;
    /// non-positive disables clipping.
    pub clip_norm: f64,
    step: u64,
    /// First/second moment buffers, aligned with the parameter list passed
    /// to every `step` call.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(
        learning_rate: f64,
        weight_decay: f64,
        clip_norm: f64,
        params: &[(String, Tensor)],
    ) -> AdamW {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            moments: params
                .iter()
                .map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Direct access for checkpointing.
    pub fn moments(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update from the gradients currently accumulated on `params`.
    /// Aborts with [`Error::NonFinite`] if any gradient is not finite.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        assert_eq!(
            params.len(),
            self.moments.len(),
            "optimizer was built for a different parameter list"
        );
        let grads: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad()).collect();
        let mut sq_norm = 0.0;
        for ((name, _), g) in params.iter().zip(&grads) {
            for &v in g {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "gradient",
                        name: name.clone(),
                    });
                }
                sq_norm += v * v;
            }
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;

        for (((_, p), g), (m, v)) in params.iter().zip(&grads).zip(self.moments.iter_mut()) {
            p.update_data(|data| {
                for i in 0..data.len() {
                    let gi = g[i] * clip_scale;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + self.eps)
                        + lr * self.weight_decay * data[i];
                }
            });
        }
        Ok(())
    }
}
