//! Adam with bias correction, plus the warmup/decay learning-rate schedule.

use indexmap::IndexMap;
use ndarray::Array2;

use crate::autodiff::Scalar;
use crate::encoder::{Gradients, Parameters};
use crate::error::{Result, XlmkError};

use super::TrainConfig;

/// Linear ramp 0 -> peak over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    let warmup = config.warmup_steps;
    let total = config.total_steps;
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    peak * (total - step) as f64 / span
}

/// First/second moment estimates, updated in place each step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar> {
    pub m: IndexMap<String, Array2<F>>,
    pub v: IndexMap<String, Array2<F>>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        let zeros = |p: &Parameters<F>| -> IndexMap<String, Array2<F>> {
            p.iter()
                .map(|(k, v)| (k.to_string(), Array2::zeros(v.raw_dim())))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    /// One Adam update. Rejects non-finite gradients before touching any
    /// state: on error neither parameters nor moments have moved.
    pub fn step(
        &mut self,
        params: &mut Parameters<F>,
        grads: &Gradients<F>,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(XlmkError::NonFiniteGradient(name.to_string()));
        }
        self.t += 1;
        let b1 = F::from_f64(config.adam_beta1);
        let b2 = F::from_f64(config.adam_beta2);
        let eps = F::from_f64(config.adam_eps);
        let lr = F::from_f64(lr);
        let one = F::one();
        let bc1 = one - b1.powi(self.t as i32);
        let bc2 = one - b2.powi(self.t as i32);

        for (name, tensor) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    // Zero gradient: parameters stay put, moments decay.
                    let m = self.m.get_mut(name).expect("moment exists");
                    let v = self.v.get_mut(name).expect("moment exists");
                    m.mapv_inplace(|x| x * b1);
                    v.mapv_inplace(|x| x * b2);
                    continue;
                }
            };
            let m = self.m.get_mut(name).expect("moment exists");
            let v = self.v.get_mut(name).expect("moment exists");
            ndarray::Zip::from(tensor)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Scale gradients so the global norm is at most `max_norm` (0 disables).
pub fn clip_global_norm<F: Scalar>(grads: &mut Gradients<F>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.global_norm().to_f64();
    if norm > max_norm {
        grads.scale(F::from_f64(max_norm / norm));
    }
}
