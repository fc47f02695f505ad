use std::collections::HashMap;

use super::graph::Mat;
use crate::error::{Error, Result};

/// Named dense tensors. Vectors are stored as `1 x n` matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl Parameters {
    /// Inserts or replaces a tensor. Iteration order is insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Mat) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Mat {
        &self.tensors[i]
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Mat::zeros(t.dim())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    /// Adds `other` scaled by `factor` into `self`; names and shapes must match.
    pub fn add_scaled(&mut self, other: &Parameters, factor: f64) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(factor, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Fails on the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }
}
