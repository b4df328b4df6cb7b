use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T> Default for TensorMap<T> {
    fn default() -> Self {
        TensorMap { entries: Vec::new() }
    }
}

impl<T: Scalar> TensorMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Parameter(format!("duplicate tensor name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Lookup that reports the missing name.
    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Parameter(format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn zeros_like(&self) -> Self {
        TensorMap {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.zeros_like())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        TensorMap {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), f(t))).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TensorMap<U> {
        TensorMap {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// `self += alpha * other`, matched by position and name.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for ((_, d), (_, s)) in self.entries.iter_mut().zip(&other.entries) {
            d.axpy(alpha, s)?;
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(
                "tensor map",
                format!("{} vs {} entries", self.entries.len(), other.entries.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape(
                    "tensor map",
                    format!("`{na}` {:?} vs `{nb}` {:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of every element's `f64` real part.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.check_layout(other).is_ok()
            && self.tensors().zip(other.tensors()).all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
            })
    }
}

/// Anything exposing its trainable tensors in a stable order.
pub trait ParamContainer<T: Scalar> {
    fn visit(&self) -> Vec<&Tensor<T>>;
    fn visit_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Scalar> ParamContainer<T> for TensorMap<T> {
    fn visit(&self) -> Vec<&Tensor<T>> {
        self.tensors().collect()
    }

    fn visit_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut().collect()
    }
}

impl<T: Scalar> ParamContainer<T> for Tensor<T> {
    fn visit(&self) -> Vec<&Tensor<T>> {
        vec![self]
    }

    fn visit_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![self]
    }
}
