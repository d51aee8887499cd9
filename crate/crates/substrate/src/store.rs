use indexmap::IndexMap;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::real::Real;

/// Named parameter arrays. Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, DenseArray<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseArray<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(DenseArray::numel).sum()
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape())))
                .collect(),
        }
    }

    /// Global L2 norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(DenseArray::sum_sq).sum::<f64>().sqrt()
    }

    /// Checks that `other` has exactly the same names (in order) and shapes.
    pub fn check_compatible<U: Real>(&self, other: &ParameterStore<U>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::NameMismatch(format!(
                "{} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((a, va), (b, vb)) in self.entries.iter().zip(other.entries.iter()) {
            if a != b {
                return Err(Error::NameMismatch(format!("`{a}` vs `{b}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Shape(format!(
                    "`{a}`: {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Scales every entry in place.
    pub fn scale(&mut self, factor: T) {
        for v in self.entries.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += factor * other`; names and shapes must match.
    pub fn add_scaled(&mut self, other: &Self, factor: T) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * *y;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
