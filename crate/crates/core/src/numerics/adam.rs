use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Linear ramp from zero to the peak rate over the first steps, then flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    /// Warm up over `fraction` of `total_steps`.
    pub fn new(peak: f64, total_steps: u64, fraction: f64) -> Self {
        Self {
            peak,
            warmup_steps: (total_steps as f64 * fraction).ceil() as u64,
        }
    }

    /// Rate for the zero-based `step`.
    pub fn rate(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak
        } else {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm` and
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let factor = T::lit(max_norm / total);
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    total
}

/// One bias-corrected Adam update at learning rate `lr`.
///
/// Every trainable parameter must carry a gradient; frozen ones are skipped.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.first.len() != store.len() {
        *state = AdamState::new(store);
    }
    if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j].to_f64().unwrap();
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.epsilon);
            *w -= T::lit(update);
        }
    }
    Ok(())
}
