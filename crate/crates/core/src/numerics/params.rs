use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph, Var};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors. Ordered so iteration (and therefore every
/// reduction over parameters) is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(pub BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and payloads, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.0 {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Bind every tensor into `g`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<T: Elem>(&self, g: &Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .0
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.cast())
                } else {
                    g.constant(t.cast())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters bound into one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Replace the variable a name resolves to, e.g. with an adapted weight.
    pub fn rebind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    /// Gradient bundle over the differentiable names. Names whose gradient
    /// never materialised (unused in the forward pass) receive zeros.
    pub fn collect<T: Elem>(&self, g: &Graph<T>, grads: &mut Grads<T>, value: f32) -> GradBundle {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            // Rebound names may resolve to derived vars; only leaves carry
            // parameter gradients.
            if !g.needs_grad(v) || !g.is_leaf(v) {
                continue;
            }
            let t = grads
                .take(v)
                .map(|t| t.cast())
                .unwrap_or_else(|| Tensor::zeros(&g.shape(v)));
            out.insert(name.clone(), t);
        }
        GradBundle { value, grads: out }
    }
}

/// Scalar objective value with gradients for every trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradBundle {
    pub value: f32,
    pub grads: BTreeMap<String, Tensor>,
}

impl GradBundle {
    pub fn scale(&self, c: f32) -> GradBundle {
        GradBundle {
            value: self.value * c,
            grads: self
                .grads
                .iter()
                .map(|(k, t)| (k.clone(), t.scale(c)))
                .collect(),
        }
    }

    /// `self + c * other`, matching names; names present on only one side
    /// are carried over.
    pub fn axpy(&self, c: f32, other: &GradBundle) -> GradBundle {
        let mut grads = self.grads.clone();
        for (k, t) in &other.grads {
            let s = t.scale(c);
            grads
                .entry(k.clone())
                .and_modify(|e| e.add_assign(&s))
                .or_insert(s);
        }
        GradBundle {
            value: self.value + c * other.value,
            grads,
        }
    }

    /// Concatenated gradient vector in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|t| t.data().iter().map(|&v| v as f64))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(Tensor::is_finite)
    }
}

/// `‖a − b‖ / ‖b‖` over two flattened gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}
