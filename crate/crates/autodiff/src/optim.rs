use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamGrads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32, beta1: f32) -> Self {
        Self {
            lr,
            beta1,
            ..Self::default()
        }
    }
}

/// Adam moments for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.v[index]
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn optimizer_step(params: &mut ParamSet, grads: &ParamGrads, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(shape_err(
            "adam",
            format!("state tracks {} tensors, params hold {}", state.m.len(), params.len()),
        ));
    }
    let mut ordered = Vec::with_capacity(params.len());
    for ((name, g), (_, p)) in grads.slots().zip(params.iter()) {
        let g = g.ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(shape_err("adam", format!("grad {:?} for param `{name}` {:?}", g.shape(), p.shape())));
        }
        ordered.push(g);
    }
    if ordered.len() != params.len() {
        return Err(Error::MissingGrad(params.names()[ordered.len()].clone()));
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (beta1 as f64).powi(t);
    let bc2 = 1.0 - (beta2 as f64).powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(ordered[i].data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}
