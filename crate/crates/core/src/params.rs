//! Named learnable parameters with share-groups.
//!
//! A *buffer* is one underlying tensor (plus its gradient). A *site* is a
//! name under which a graph refers to a buffer. Several sites may alias one
//! buffer; together they form a share-group and their gradients accumulate
//! into the single buffer gradient.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Conv or linear weight: subject to weight decay.
    Weight,
    /// Bias or BN affine parameter: no weight decay.
    Affine,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct State<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    sites: IndexMap<String, ParamId>,
    states: Vec<State<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            sites: IndexMap::new(),
            states: Vec::new(),
        }
    }

    /// Register a fresh buffer under `name`.
    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        if self.sites.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
            grad,
        });
        self.sites.insert(name.to_string(), id);
        Ok(id)
    }

    /// Add `site` as another name for the buffer `id`.
    pub fn share(&mut self, site: &str, id: ParamId) -> Result<ParamId> {
        if self.sites.contains_key(site) {
            return Err(Error::DuplicateParam(site.to_string()));
        }
        if id.0 >= self.params.len() {
            return Err(Error::UnknownParam(format!("#{}", id.0)));
        }
        self.sites.insert(site.to_string(), id);
        Ok(id)
    }

    /// Move `site` onto a new buffer holding a copy of its current value.
    pub fn detach(&mut self, site: &str) -> Result<ParamId> {
        let old = self.lookup(site)?;
        let p = &self.params[old.0];
        let copy = Param {
            name: site.to_string(),
            kind: p.kind,
            value: p.value.clone(),
            grad: Tensor::zeros(p.value.shape()),
        };
        let id = ParamId(self.params.len());
        self.params.push(copy);
        self.sites.insert(site.to_string(), id);
        Ok(id)
    }

    pub fn add_state(&mut self, name: &str, value: Tensor<T>) -> StateId {
        let id = StateId(self.states.len());
        self.states.push(State {
            name: name.to_string(),
            value,
        });
        id
    }

    pub fn id(&self, site: &str) -> Option<ParamId> {
        self.sites.get(site).copied()
    }

    pub fn lookup(&self, site: &str) -> Result<ParamId> {
        self.id(site)
            .ok_or_else(|| Error::UnknownParam(site.to_string()))
    }

    #[inline]
    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    #[inline]
    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.params[id.0].value.shape()
    }

    pub fn state(&self, id: StateId) -> &Tensor<T> {
        &self.states[id.0].value
    }

    pub fn state_mut(&mut self, id: StateId) -> &mut Tensor<T> {
        &mut self.states[id.0].value
    }

    pub fn states(&self) -> &[State<T>] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [State<T>] {
        &mut self.states
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// `(site name, buffer)` in registration order.
    pub fn sites(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.sites.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn num_buffers(&self) -> usize {
        self.params.len()
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    /// Sites aliasing `id`, in registration order.
    pub fn group(&self, id: ParamId) -> Vec<&str> {
        self.sites
            .iter()
            .filter(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Learnable scalar count; every buffer is counted once however many
    /// sites alias it.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_sites_count_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("stage1.g1", ParamKind::Weight, Tensor::zeros(Shape::new(12, 64, 1, 1)))
            .unwrap();
        store.share("stage1.block2.g1", w).unwrap();
        store.share("stage1.block3.g1", w).unwrap();
        store
            .add("bn.gamma", ParamKind::Affine, Tensor::zeros(Shape::channels(12)))
            .unwrap();
        assert_eq!(store.count(), 12 * 64 + 12);
        assert_eq!(store.num_buffers(), 2);
        assert_eq!(store.num_sites(), 4);
        assert_eq!(store.group(w).len(), 3);
    }

    #[test]
    fn duplicate_site_rejected() {
        let mut store = ParamStore::<f32>::new();
        let w = store
            .add("w", ParamKind::Weight, Tensor::zeros(Shape::scalar()))
            .unwrap();
        assert!(matches!(
            store.add("w", ParamKind::Weight, Tensor::zeros(Shape::scalar())),
            Err(Error::DuplicateParam(_))
        ));
        assert!(store.share("w", w).is_err());
        assert!(store.share("v", ParamId(7)).is_err());
    }
}
