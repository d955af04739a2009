use std::collections::HashMap;

use super::params::{Gradients, ParamSet};
use super::tensor::Scalar;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter type.
///
/// A parameter with no gradient in a step is left alone and its step count
/// does not advance.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// Applies one update. Non-finite gradients abort the step before any
    /// parameter changes.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| invalid!("gradient for unknown parameter {name}"))?;
            if p.shape() != g.shape() {
                return Err(invalid!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let gi = gi.to_f64().expect("finite");
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::lit(w.to_f64().expect("finite") - update);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self, name: &str) -> u32 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}

/// `lr0 · factor^floor(epoch / every)`.
pub fn step_decay(lr0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    lr0 * factor.powi((epoch / every.max(1)) as i32)
}
