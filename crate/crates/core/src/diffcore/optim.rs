use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

/// A trainable array together with its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Array,
    pub first_moment: Array,
    pub second_moment: Array,
    pub step: u64,
}

impl Parameter {
    pub fn new(value: Array) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            first_moment: Array::zeros(&shape),
            second_moment: Array::zeros(&shape),
            step: 0,
        }
    }
}

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Fails if the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    /// Inserts a parameter with existing optimizer state, replacing any
    /// parameter of the same name.
    pub fn insert_with_state(&mut self, name: impl Into<String>, param: Parameter) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// Removes every parameter whose name does not satisfy `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// Every parameter must have a gradient of matching shape; a missing or
/// misshapen gradient is a configuration error and leaves `params` untouched.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Array>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, p) in &params.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: p.value.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.params.contains_key(*k)) {
        return Err(Error::Config(format!(
            "gradient for unknown parameter `{extra}`"
        )));
    }

    for (name, p) in params.params.iter_mut() {
        let g = &grads[name];
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        let x = p.value.data_mut();
        for i in 0..x.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
