use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter gradients, keyed by checkpoint parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    /// Keep only adapter gradients.
    pub fn lora_only(&self) -> Grads {
        Grads {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.contains(".lora_"))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise sum; both sides must hold the same names and shapes.
    pub fn add(&self, other: &Grads) -> Result<Grads> {
        if self.map.len() != other.map.len() {
            return Err(Error::shape("gradient sets differ in size"));
        }
        let mut map = BTreeMap::new();
        for (k, v) in &self.map {
            let o = other
                .map
                .get(k)
                .ok_or_else(|| Error::shape(format!("gradient `{k}` missing")))?;
            map.insert(k.clone(), v.add(o)?);
        }
        Ok(Grads { map })
    }

    /// `max |a−b| / max(max |b|, tiny)` over the union; infinite if the
    /// name sets differ.
    pub fn max_rel_err(&self, reference: &Grads) -> f64 {
        if self.map.len() != reference.map.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (k, r) in &reference.map {
            let Some(a) = self.map.get(k) else {
                return f64::INFINITY;
            };
            let scale = r.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            worst = worst.max(a.max_abs_diff(r) / scale);
        }
        worst
    }

    /// Union with another disjoint set.
    pub fn extend(&mut self, other: Grads) {
        self.map.extend(other.map);
    }
}
