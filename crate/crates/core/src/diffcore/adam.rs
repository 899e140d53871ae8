use ndarray::{ArrayD, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators and a step count per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, _, v)| ArrayD::zeros(v.raw_dim())).collect();
        Self {
            config,
            second: zeros.clone(),
            first: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn steps(&self, index: usize) -> u64 {
        self.steps[index]
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` are
/// left untouched and their moments do not advance.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<ArrayD<f64>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.steps.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} gradients / {} states for {} parameters",
            grads.len(),
            state.steps.len(),
            params.len()
        )));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    for (i, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let finite = match grad.as_slice_memory_order() {
            Some(x) => x.iter().all(|g| g.is_finite()),
            None => grad.iter().all(|g| g.is_finite()),
        };
        if !finite {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let id = super::params::ParamId(i);
        if grad.shape() != params.get(id).shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        Zip::from(params.get_mut(id))
            .and(&mut state.first[i])
            .and(&mut state.second[i])
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
