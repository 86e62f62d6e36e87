use std::collections::BTreeMap;

use super::Matrix;
use crate::error::{Error, Result};

/// Named collection of trainable arrays.
///
/// Names are dotted paths such as `agent.gru.w_hh`. Iteration order is the
/// lexicographic order of names, which keeps every reduction over the
/// store deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    /// Copies values from `other`, requiring identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.entries.values_mut().zip(other.entries.values()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Verifies that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, m) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::shape(format!("array `{name}` is missing"))),
                Some(o) if o.shape() != m.shape() => {
                    return Err(Error::shape(format!(
                        "array `{name}`: expected {}x{}, found {}x{}",
                        m.rows(),
                        m.cols(),
                        o.rows(),
                        o.cols()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other
            .entries
            .keys()
            .find(|k| !self.entries.contains_key(*k))
        {
            return Err(Error::shape(format!("unexpected array `{extra}`")));
        }
        Ok(())
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Matrix) {
        self.entries.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.entries.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.entries.values_mut().for_each(|g| g.scale(factor));
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(Matrix::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Matrix::all_finite)
    }
}
