use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, shaped, row-major parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                what: "parameter values",
                expected: n,
                got: values.len(),
            });
        }
        if self.id(&name).is_some() {
            return Err(Error::Config(alloc::format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::LengthMismatch {
                expected: self.numel(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
