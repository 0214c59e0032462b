//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{SeededRng, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered set of named, trainable tensors. Names are dotted paths whose
/// first component is the checkpoint segment (`dfhc.block0.attn.q.p0`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t.with_requires_grad());
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut SeededRng) -> ParamId {
        let t = rng.normal_tensor(shape, INIT_STD);
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, new value {:?}",
                self.names[id.0],
                cur.shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value.with_requires_grad();
        Ok(())
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Adds `weight ×` each gradient into the matching parameter's buffer.
    /// Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor<T>)], weight: T) -> Result<()> {
        for (id, g) in grads {
            if self.frozen[id.0] {
                continue;
            }
            self.tensors[id.0].accumulate_grad(g.data(), weight)?;
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameters: a parameter is placed on the tape
/// the first time a forward pass reads it.
pub struct Graph<'p, T: Scalar = f64> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph whose parameters are differentiable leaves.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, true)
    }

    /// Graph for inference: parameters enter the tape as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: RefCell::new(vec![None; params.len()]),
            trainable,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable && !self.params.is_frozen(id) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Tape gradients of every bound, differentiable parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, slot)| slot.and_then(|v| self.tape.grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}
