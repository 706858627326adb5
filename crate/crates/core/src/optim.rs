//! AdamW with decoupled weight decay.
//!
//! ```text
//! m  = β1·m + (1 − β1)·g
//! v  = β2·v + (1 − β2)·g²
//! m̂ = m / (1 − β1ᵗ),  v̂ = v / (1 − β2ᵗ)
//! θ  = θ − lr·m̂ / (√v̂ + ε) − lr·λ·θ
//! ```
//!
//! The decay term uses the pre-step θ and never passes through the moment
//! estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Parameter names (or layer prefixes such as `"fc2"`) exempt from decay.
    pub no_decay: Vec<String>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
            no_decay: Vec::new(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("train.optimizer.{k}");
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(key("lr"), format!("must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key(name), format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(
                key("epsilon"),
                format!("must be > 0, got {}", self.epsilon),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                key("weight_decay"),
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }

    fn decays(&self, name: &str) -> bool {
        !self.no_decay.iter().any(|n| {
            name == n || name.strip_prefix(n.as_str()).is_some_and(|r| r.starts_with('.'))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    pub t: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update of `params` in place.
///
/// All alignment and finiteness checks run before anything is modified, so a
/// rejected step leaves both `params` and `state` untouched.
pub fn adamw_step<T: Element>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut OptimizerState<T>,
    config: &AdamWConfig,
) -> Result<()> {
    config.validate()?;
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    params.check_aligned(&state.v)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            name: name.to_string(),
        });
    }

    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one_b1 = T::from_f64(1.0 - config.beta1);
    let one_b2 = T::from_f64(1.0 - config.beta2);
    let bc1 = T::from_f64(1.0 - config.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - config.beta2.powi(t));
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.epsilon);

    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((name, theta), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let decay = if config.decays(name) {
            T::from_f64(config.lr * config.weight_decay)
        } else {
            T::zero()
        };
        for (((p, &g), m), v) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - decay * *p;
        }
    }
    Ok(())
}
