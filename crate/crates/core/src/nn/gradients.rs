//! Name-keyed gradient accumulator.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Real;

/// Gradients keyed by hierarchical parameter name (`stem.0.conv.weight`, ...).
/// BTreeMap keeps iteration order deterministic.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Real> {
    map: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            map: BTreeMap::new(),
        }
    }

    /// Accumulate a gradient contribution for `name`.
    pub fn add(&mut self, name: &str, grad: ArrayD<T>) {
        match self.map.get_mut(name) {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), grad.shape(), "gradient shape for {name}");
                acc.zip_mut_with(&grad, |a, g| *a += *g);
            }
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Largest absolute entry across all gradients (diagnostics).
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    /// Global L2 norm across all gradients (diagnostics).
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.as_f64().is_finite()))
    }
}
