//! Named parameter registry shared by models, the optimiser and checkpoints.

use std::collections::HashMap;

use super::{Tape, Tensor};
use crate::{Error, Result, Scalar};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a trainable tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::usage(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the values of an existing tensor, keeping its trainability flag.
    pub fn set_values(&mut self, name: &str, values: &Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::usage(format!("no parameter named `{name}`")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != values.shape() {
            return Err(Error::dim(format!(
                "parameter `{name}` has shape {:?}, replacement has {:?}",
                t.shape(),
                values.shape()
            )));
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
                if !trainable {
                    t.grad = None;
                }
            }
        }
    }

    /// Adds the gradients recorded on `tape` into the stored gradient buffers.
    /// Trainable parameters absent from the tape receive a zero gradient.
    pub fn absorb(&mut self, tape: &Tape<T>) {
        for &(id, var) in tape.params() {
            if let Some(g) = tape.grad(var) {
                self.tensors[id.0].accumulate_grad(g);
            }
        }
        for t in &mut self.tensors {
            if t.requires_grad && t.grad.is_none() {
                t.grad = Some(vec![T::zero(); t.len()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter().map(|v| v.to_f64_lossy().powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        norm
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("det.w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.add("head.w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = store();
        assert!(s.add("det.w", Tensor::zeros(vec![1])).is_err());
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["det.w", "head.w"]);
        assert_eq!(s.numel(), 3);
        assert_eq!(s.by_name("head.w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn set_values_checks_shape() {
        let mut s = store();
        assert!(s.set_values("det.w", &Tensor::zeros(vec![3])).is_err());
        assert!(s.set_values("nope", &Tensor::zeros(vec![2])).is_err());
        s.set_values("det.w", &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(s.by_name("det.w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn absorb_accumulates_and_fills_unused_with_zero() {
        let mut s = store();
        let det = s.id("det.w").unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&s, det);
            let y = tape.sum(w);
            tape.backward(y).unwrap();
            s.absorb(&tape);
        }
        assert_eq!(s.by_name("det.w").unwrap().grad.as_deref(), Some(&[2.0, 2.0][..]));
        assert_eq!(s.by_name("head.w").unwrap().grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let mut s = store();
        s.set_trainable("det.", false);
        let mut tape = Tape::new();
        let w = tape.param(&s, s.id("det.w").unwrap());
        let h = tape.param(&s, s.id("head.w").unwrap());
        let a = tape.sum(w);
        let y = tape.mul(a, h).unwrap();
        tape.backward(y).unwrap();
        s.absorb(&tape);
        assert!(s.by_name("det.w").unwrap().grad.is_none());
        assert_eq!(s.by_name("head.w").unwrap().grad.as_deref(), Some(&[3.0][..]));
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut s = store();
        s.get_mut(s.id("det.w").unwrap()).grad = Some(vec![3.0, 0.0]);
        s.get_mut(s.id("head.w").unwrap()).grad = Some(vec![4.0]);
        assert_eq!(s.clip_grad_norm(10.0), 5.0);
        assert_eq!(s.grad_norm(), 5.0);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cast_round_trip_keeps_names() {
        let s = store();
        let back: ParamStore<f64> = s.cast::<f32>().cast();
        assert_eq!(back.by_name("det.w").unwrap().data(), s.by_name("det.w").unwrap().data());
    }
}
