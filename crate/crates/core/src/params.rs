//! Named, learnable parameters and their binding onto a tape.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered parameter table. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `tape` as a leaf. With `track` the leaves
    /// record gradients; otherwise they are constants (inference).
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid parameter");
                leaf.requires_grad = track;
                tape.leaf(leaf)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of bound leaves into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let Some(g) = tape.grad(v) else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by id.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform in ±1/sqrt(fan_in).
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// N(0, 1/d), used for embeddings and structural encodings.
pub fn embedding_normal<R: Rng + ?Sized>(shape: &[usize], d: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (d.max(1) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_grads() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = store.add("b", Tensor::vector(vec![3.0, 4.0]));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let prod = tape.mul(p[a], p[b]).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape, &p);
        assert_eq!(store.get(a).grad.as_deref(), Some(&[3.0, 4.0][..]));
        assert_eq!(store.get(b).grad.as_deref(), Some(&[1.0, 2.0][..]));
        assert_eq!(store.id("b"), Some(b));
        assert_eq!(store.num_scalars(), 4);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1]));
        store.add("w", Tensor::zeros(&[1]));
    }
}
