use std::collections::HashMap;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle of a parameter or buffer inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Trainable,
    /// Persistent state that is not learned (batchnorm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam: AdamState<T>,
    pub kind: ParamKind,
}

/// Named, ordered collection of model parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.split('.').all(|seg| !seg.is_empty())
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, ParamKind::Buffer)
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if !valid_name(name) {
            return Err(Error::Contract(format!("invalid parameter name {name:?}")));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            adam: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
            kind,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.add_assign_slice(g.data()),
            None => p.grad = Some(g.clone()),
        }
    }

    /// Converts every value to another precision; optimizer state and
    /// gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.cast(), p.kind)
                .expect("names already validated");
        }
        out
    }
}
