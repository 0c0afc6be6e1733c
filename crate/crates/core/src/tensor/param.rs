use std::collections::BTreeMap;

use super::{GradStore, Value};
use crate::error::{Error, Result};

/// Named trainable parameters plus plain-SGD state.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Value>,
    learning_rate: f64,
    iteration: u64,
}

impl ParamStore {
    pub fn new(learning_rate: f64) -> Result<ParamStore> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(ParamStore {
            params: BTreeMap::new(),
            learning_rate,
            iteration: 0,
        })
    }

    /// Registers a parameter. Names are unique.
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Value::param(shape, data)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.params.get(name)
    }

    /// Looks up a parameter that must exist.
    pub fn require(&self, name: &str) -> Result<&Value> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Counts an iteration without touching parameters (skipped batches).
    pub fn advance(&mut self) {
        self.iteration += 1;
    }

    /// Replaces a parameter's data, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let old = self.require(name)?;
        let shape = old.shape().to_vec();
        let v = Value::param(&shape, data)?;
        self.params.insert(name.to_string(), v);
        Ok(())
    }

    /// Constant copies of every parameter, for inference without a graph.
    pub fn frozen(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.stop_gradient()))
                .collect(),
            learning_rate: self.learning_rate,
            iteration: self.iteration,
        }
    }

    pub(crate) fn set_iteration(&mut self, t: u64) {
        self.iteration = t;
    }
}

/// `theta <- theta - lr * grad` for every parameter, then `t += 1`.
///
/// All gradients are checked before any parameter changes; a missing or
/// non-finite gradient aborts with [`Error::Divergence`] and leaves the store
/// untouched.
pub fn sgd_step(store: &mut ParamStore, grads: &GradStore) -> Result<()> {
    for (name, p) in &store.params {
        let g = grads
            .get(p)
            .ok_or_else(|| Error::Divergence(format!("no gradient for parameter `{name}`")))?;
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient {bad} in parameter `{name}`"
            )));
        }
    }
    let lr = store.learning_rate;
    let updated: Vec<(String, Value)> = store
        .params
        .iter()
        .map(|(name, p)| {
            let g = grads.get(p).expect("checked above");
            let data = p.data().iter().zip(g).map(|(t, d)| t - lr * d).collect();
            (name.clone(), Value::param(p.shape(), data).expect("same shape"))
        })
        .collect();
    store.params.extend(updated);
    store.iteration += 1;
    Ok(())
}
