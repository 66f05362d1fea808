//! Adaptive-moment optimizer with serializable state.
//!
//! Hand-rolled so its first/second-moment tensors can be written into
//! checkpoints, giving bitwise-deterministic resume. Works for any float
//! dtype (the GMM fitter reuses it in f64).

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Result, VsplitError};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub params: AdamParams,
    /// Step counter (number of completed updates).
    pub t: u64,
    /// Per-parameter (m, v) moment tensors, keyed by parameter name.
    state: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self {
            params,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// One update over all variables that received a gradient.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.state.remove(name) {
                Some(s) => s,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            // detach: the stored moments must not keep the step's autodiff
            // graph (or the gradient tensors) alive across iterations
            let m = ((m * p.beta1)? + (g * (1.0 - p.beta1))?)?.detach();
            let v = ((v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?.detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat * p.lr)?.div(&(v_hat.sqrt()? + p.eps)?)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            self.state.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors in name order, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor, Tensor)> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let (m, v) = &self.state[n];
                (n.clone(), m.clone(), v.clone())
            })
            .collect()
    }

    /// Restore moment tensors (inverse of [`Adam::state_tensors`]).
    pub fn load_state(&mut self, t: u64, entries: Vec<(String, Tensor, Tensor)>) -> Result<()> {
        self.t = t;
        self.state.clear();
        for (name, m, v) in entries {
            if m.shape() != v.shape() {
                return Err(VsplitError::Invalid(format!(
                    "adam state for {name}: m/v shape mismatch"
                )));
            }
            self.state.insert(name, (m, v));
        }
        Ok(())
    }
}
