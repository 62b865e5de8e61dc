use std::collections::HashMap;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors. Names are `/`-separated paths such as
/// `net3d/completion/rab0/ddr1/w`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph handles for every tensor of a store, created by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in store order, e.g. the leaves a gradient check creates.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Adds every parameter to `g` as an untracked constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Copies leaf gradients from `g` into the stored tensors. Parameters the
    /// backward pass never reached receive a zero gradient.
    pub fn pull_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        ensure!(bound.0.len() == self.tensors.len(), "binding does not belong to this store");
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            match g.grad(v) {
                Some(gr) => t.accumulate_grad(gr)?,
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Shapes must agree name by name; returns one line per difference.
    pub fn shape_diff(&self, other: &ParamStore) -> Vec<String> {
        let mut diff = Vec::new();
        for (name, t) in self.iter() {
            match other.by_name(name) {
                None => diff.push(format!("missing {name} {:?}", t.shape())),
                Some(o) if o.shape() != t.shape() => {
                    diff.push(format!("{name}: expected {:?}, found {:?}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        for (name, t) in other.iter() {
            if self.id(name).is_none() {
                diff.push(format!("unexpected {name} {:?}", t.shape()));
            }
        }
        diff
    }

    /// Replaces values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let diff = self.shape_diff(other);
        ensure!(diff.is_empty(), "checkpoint does not match network:\n  {}", diff.join("\n  "));
        for (name, t) in other.iter() {
            let id = self.id(name).expect("checked by shape_diff");
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                out.add(name, t.clone()).expect("names are unique");
            }
        }
        out
    }
}

/// Uniform in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-s..=s))
}
