//! Adam optimizer and cosine-annealed learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{ParamKind, Params};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const BASE_LR: f64 = 0.001;

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    first: HashMap<String, Vec<f32>>,
    second: HashMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers in sorted name order, for serialization.
    pub fn export(&self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut names: Vec<&String> = self.first.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.first[n].clone(), self.second[n].clone()))
            .collect()
    }

    pub fn import(step: u64, entries: Vec<(String, Vec<f32>, Vec<f32>)>) -> Self {
        let mut first = HashMap::new();
        let mut second = HashMap::new();
        for (name, m, v) in entries {
            first.insert(name.clone(), m);
            second.insert(name, v);
        }
        AdamState { step, first, second }
    }

    /// One bias-corrected Adam update over all trainable parameters.
    ///
    /// Validates the whole gradient map before mutating anything, so a
    /// non-finite gradient aborts the step with the parameters, moments and
    /// step counter untouched.
    pub fn apply(
        &mut self,
        params: &mut dyn Params,
        grads: &HashMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<()> {
        let mut problem: Option<Error> = None;
        params.visit(&mut |name, kind, tensor| {
            if problem.is_some() || kind != ParamKind::Trainable {
                return;
            }
            match grads.get(name) {
                None => {
                    problem = Some(Error::Autodiff(format!(
                        "no gradient for parameter '{name}'"
                    )));
                }
                Some(g) if g.len() != tensor.numel() => {
                    problem = Some(Error::ShapeMismatch(format!(
                        "gradient for '{name}' has {} values, parameter has {}",
                        g.len(),
                        tensor.numel()
                    )));
                }
                Some(g) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        problem = Some(Error::NonFinite {
                            op: format!("gradient of '{name}'"),
                        });
                    }
                }
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut(&mut |name, kind, tensor| {
            if kind != ParamKind::Trainable {
                return;
            }
            let g = &grads[name];
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let theta = tensor.data_mut();
            for i in 0..g.len() {
                let gi = f64::from(g[i]);
                let mi = ADAM_BETA1 * f64::from(m[i]) + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * f64::from(v[i]) + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                theta[i] = (f64::from(theta[i]) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
            }
        });
        Ok(())
    }
}

/// Cosine annealing without restarts over a fixed step budget:
/// `lr(t) = base_lr · 0.5 · (1 + cos(π·t/total))`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
