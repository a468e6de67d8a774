use std::ops::Index;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of trainable tensors.
///
/// Each tensor carries its own gradient accumulator. Gradients are added by
/// [`ParamSet::accumulate`] and only cleared by [`ParamSet::zero_grad`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// The graph variables a [`ParamSet`] was bound to for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Overwrites every entry of the named tensor with `value`.
    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        self.tensors[id.0].data_mut().fill(value);
        Ok(())
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::shape("set_data", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Places every parameter on `graph`. Trainable bindings receive
    /// gradients on backward; frozen ones are plain constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.detached())
                } else {
                    graph.constant(t.detached())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of the bound variables into each parameter's
    /// accumulator.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (tensor, var) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.wrt(*var) {
                for (acc, v) in tensor.grad_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}
