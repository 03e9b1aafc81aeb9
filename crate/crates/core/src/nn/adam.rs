use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam optimizer state: per-parameter first and second moments plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    moments: IndexMap<String, Moments>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| {
                let m = Moments {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                };
                (name.to_string(), m)
            })
            .collect();
        AdamState {
            config,
            step_count: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f32]> {
        self.moments.get(name).map(|m| m.v.as_slice())
    }
}

/// One bias-corrected Adam update over every parameter, then clears the
/// gradients. Fails without touching anything if a gradient is missing.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
        if !state.moments.contains_key(name) {
            return Err(Error::Config(format!("optimizer has no state for `{name}`")));
        }
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - (beta1 as f64).powi(t);
    let c2 = 1.0 - (beta2 as f64).powi(t);
    for (name, param) in params.iter_mut() {
        let moments = state.moments.get_mut(name).expect("checked above");
        let grad = param.grad().expect("checked above").to_vec();
        for (((theta, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(moments.m.iter_mut())
            .zip(moments.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            *theta -= (learning_rate as f64 * m_hat / (v_hat.sqrt() + epsilon as f64)) as f32;
        }
        param.zero_grad();
    }
    Ok(())
}
