//! Named parameter declarations and their materialized storage.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::truncated_normal;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a tensor is for; decides init, trainability and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Conv, dense and attention projection kernels.
    Weight,
    Bias,
    /// Normalization scale.
    Gain,
    /// Normalization shift.
    Shift,
    RelBias,
    RunningMean,
    RunningVar,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }

    pub fn decays(self) -> bool {
        self == Role::Weight
    }
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.role {
            Role::Weight => Tensor::from_fn(&self.shape, |_| T::of(truncated_normal(rng, INIT_STD))),
            Role::Gain | Role::RunningVar => Tensor::ones(&self.shape),
            Role::Bias | Role::Shift | Role::RelBias | Role::RunningMean => Tensor::zeros(&self.shape),
        }
    }
}

/// Collects parameter declarations while a network is being assembled.
#[derive(Debug, Default, Clone)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    index: BTreeMap<String, ParamId>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: String, shape: &[usize], role: Role) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.specs.len());
        self.index.insert(name.clone(), id);
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            role,
        });
        Ok(id)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Checkpoint order: depth-first over the dotted module path, children
/// compared lexicographically.
pub fn path_order(a: &str, b: &str) -> Ordering {
    a.split('.').cmp(b.split('.'))
}

#[derive(Debug, Clone)]
pub struct Entry<T> {
    pub spec: ParamSpec,
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Entry<T> {
    pub fn trainable(&self) -> bool {
        self.spec.role.trainable()
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn materialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let entries: Vec<Entry<T>> = specs
            .iter()
            .map(|s| Entry {
                value: Arc::new(s.init(rng)),
                spec: s.clone(),
                grad: None,
            })
            .collect();
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), ParamId(i)))
            .collect();
        ParamStore { entries, index }
    }

    /// Store for `specs` with explicit values, one per spec in order.
    pub fn with_values(specs: &[ParamSpec], values: Vec<Tensor<T>>) -> Result<Self> {
        if values.len() != specs.len() {
            return Err(Error::config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                values.len()
            )));
        }
        let mut entries = Vec::with_capacity(specs.len());
        for (s, v) in specs.iter().zip(values) {
            if s.shape != v.shape() {
                return Err(Error::dim("parameter", &s.shape, v.shape()));
            }
            entries.push(Entry {
                spec: s.clone(),
                value: Arc::new(v),
                grad: None,
            });
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), ParamId(i)))
            .collect();
        Ok(ParamStore { entries, index })
    }

    /// Store holding exactly the given named tensors as trainable weights.
    pub fn from_tensors(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut b = ParamBuilder::new();
        let mut values = Vec::with_capacity(named.len());
        for (name, t) in named {
            b.declare(name, t.shape(), Role::Weight)?;
            values.push(t);
        }
        let specs = b.into_specs();
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), ParamId(i)))
            .collect();
        let entries = specs
            .into_iter()
            .zip(values)
            .map(|(spec, v)| Entry {
                spec,
                value: Arc::new(v),
                grad: None,
            })
            .collect();
        Ok(ParamStore { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut Entry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Entry<T>> {
        self.id(name).map(|i| &self.entries[i.0])
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParam(name.into()))?;
        let e = &mut self.entries[id.0];
        if e.spec.shape != t.shape() {
            return Err(Error::dim("set_value", &e.spec.shape, t.shape()));
        }
        e.value = Arc::new(t);
        Ok(())
    }

    /// Trainable scalar count.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable())
            .map(|e| e.spec.numel())
            .sum()
    }

    /// Entry ids in checkpoint order.
    pub fn ordered_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.entries.len()).map(ParamId).collect();
        ids.sort_by(|a, b| path_order(&self.entries[a.0].spec.name, &self.entries[b.0].spec.name));
        ids
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Tensor<T>)>) {
        for (id, g) in grads {
            let e = &mut self.entries[id.0];
            match &mut e.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.entries[id.0].value = Arc::new(t);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    spec: e.spec.clone(),
                    value: Arc::new(e.value.cast()),
                    grad: None,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn duplicate_names_rejected() {
        let mut b = ParamBuilder::new();
        b.declare("a.weight".to_string(), &[2], Role::Weight).unwrap();
        assert!(b.declare("a.weight".to_string(), &[2], Role::Weight).is_err());
    }

    #[test]
    fn path_order_is_depth_first_lexicographic() {
        let mut names = vec!["b.x", "a.weight", "a.b.c", "a.bias", "a.b"];
        names.sort_by(|x, y| path_order(x, y));
        assert_eq!(names, vec!["a.b", "a.b.c", "a.bias", "a.weight", "b.x"]);
    }
}
