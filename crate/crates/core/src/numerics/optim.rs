use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{MuseError, Result};

/// Linear warmup followed by cosine decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosineSchedule {
    pub base: f64,
    pub final_value: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            final_value: 1e-5,
            warmup_steps: 100,
            total_steps: 2000,
        }
    }
}

impl CosineSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.final_value + 0.5 * (self.base - self.final_value) * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
            clip_norm: 3.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Names that are exempt from weight decay (biases, norm gains, tokens).
pub fn no_decay(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".g") || name.ends_with("cls_token") || name.ends_with("pos_embed")
}

/// One AdamW update at learning rate `lr`. `step` is only used to label
/// a non-finite gradient error.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
    step: usize,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(MuseError::arg("optimizer_step: parameter/gradient layout mismatch"));
    }
    for (name, g) in grads.iter() {
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(MuseError::Training {
                step,
                term: format!("gradient of {name}"),
                value: *bad,
            });
        }
    }
    let norm = grads.global_norm();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / (norm + 1e-6)
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((name, p), ((_, g), ((_, m), (_, v)))) in params
        .iter_mut()
        .zip(grads.iter().zip(state.m.iter_mut().zip(state.v.iter_mut())))
    {
        let wd = if no_decay(name) { 0.0 } else { cfg.weight_decay };
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gc = gi * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gc;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gc * gc;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *pi -= lr * (update + wd * *pi);
        }
    }
    Ok(())
}
