use std::cell::RefCell;

use indexmap::IndexMap;

use super::array::DiffArray;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Named parameter arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: IndexMap<String, DiffArray<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut a: DiffArray<T>) {
        a.set_requires_grad(true);
        self.entries.insert(name.into(), a);
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&DiffArray<T>> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(DiffArray::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffArray<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(DiffArray::zero_grad);
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((n1, a1), (n2, a2))| n1 == n2 && a1.shape() == a2.shape())
    }

    /// Every scalar in storage order, converted to `f64`.
    pub fn flat_f64(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|a| a.data().iter().map(|v| v.to_f64_lossy()))
            .collect()
    }

    pub fn add_normal(&mut self, rng: &mut Rng, name: &str, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        self.insert(name, DiffArray::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn add_uniform(&mut self, rng: &mut Rng, name: &str, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.uniform_in(-bound, bound)))
            .collect();
        self.insert(name, DiffArray::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, DiffArray::filled(shape, T::lit(v)));
    }
}

/// Lazily places parameters on a tape and remembers which node holds each.
pub struct Binding<'p, 't, T: Scalar> {
    tape: &'t Tape<T>,
    params: &'p ParamSet<T>,
    trainable: bool,
    bound: RefCell<IndexMap<String, Var<'t, T>>>,
}

impl<'p, 't, T: Scalar> Binding<'p, 't, T> {
    /// With `trainable == false` every parameter enters the tape as a constant.
    pub fn new(tape: &'t Tape<T>, params: &'p ParamSet<T>, trainable: bool) -> Self {
        Self {
            tape,
            params,
            trainable,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let a = self.params.require(name)?;
        let v = if self.trainable {
            self.tape.variable(a.shape(), a.data().to_vec())?
        } else {
            self.tape.constant(a.shape(), a.data().to_vec())?
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for `name` from now on instead of the stored array.
    pub fn bind(&self, name: &str, v: Var<'t, T>) -> Result<()> {
        let a = self.params.require(name)?;
        if v.shape() != a.shape() {
            return Err(Error::dim(format!("{name}: bound {:?} over {:?}", v.shape(), a.shape())));
        }
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(())
    }

    /// Gradient for every parameter (zeros for ones not reached).
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<(String, Vec<T>)> {
        let bound = self.bound.borrow();
        self.params
            .iter()
            .map(|(name, a)| {
                let g = match bound.get(name) {
                    Some(v) => grads.get_or_zeros(*v),
                    None => vec![T::zero(); a.numel()],
                };
                (name.to_string(), g)
            })
            .collect()
    }
}
