use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Which update rule an [`Optimizer`] applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or bias-corrected Adam over a [`ParamStore`].
///
/// Every registered parameter must carry a gradient buffer when `step` runs;
/// a missing buffer means the parameter never reached the tape, which is a
/// wiring bug, not a zero gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Optional global gradient-norm clip applied before the update.
    pub max_grad_norm: Option<f64>,
    step_count: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            max_grad_norm: None,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::adam_default(), learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter, then clears all gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }

        let clip_scale = match self.max_grad_norm {
            Some(max) => {
                let sq: f64 = params
                    .iter()
                    .flat_map(|(_, t)| t.grad().unwrap().iter())
                    .map(|g| g * g)
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (_, t) in params.iter_mut() {
                    let grad = t.grad().unwrap().to_vec();
                    for (p, g) in t.data_mut().iter_mut().zip(grad) {
                        *p -= lr * clip_scale * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t_step = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t_step);
                let bc2 = 1.0 - beta2.powi(t_step);
                for (name, t) in params.iter_mut() {
                    let grad: Vec<f64> = t
                        .grad()
                        .unwrap()
                        .iter()
                        .map(|g| g * clip_scale)
                        .collect();
                    let m = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    for ((p, &g), (mi, vi)) in t
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        params.clear_grads();
        Ok(())
    }

    /// Moment buffers and step counter, for checkpointing. Order follows the
    /// store's registration order.
    pub fn state_entries(&self, params: &ParamStore) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        out.push(("step".to_string(), vec![self.step_count as f64]));
        if matches!(self.kind, OptimizerKind::Adam { .. }) {
            for name in params.names() {
                if let Some(m) = self.m.get(name) {
                    out.push((format!("m.{name}"), m.clone()));
                }
                if let Some(v) = self.v.get(name) {
                    out.push((format!("v.{name}"), v.clone()));
                }
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::state_entries`].
    pub fn restore_state(&mut self, entries: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, data) in entries {
            if name == "step" {
                self.step_count = data[0] as u64;
            } else if let Some(param) = name.strip_prefix("m.") {
                self.m.insert(param.to_string(), data.clone());
            } else if let Some(param) = name.strip_prefix("v.") {
                self.v.insert(param.to_string(), data.clone());
            } else {
                return Err(Error::Invalid(format!(
                    "unknown optimizer state entry '{name}'"
                )));
            }
        }
        Ok(())
    }
}
