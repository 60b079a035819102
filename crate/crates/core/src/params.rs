//! Named parameter storage shared by the encoders, heads and temperatures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array2,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Param>,
}

/// Graph nodes for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct ParamNodes(Vec<NodeId>);

impl std::ops::Index<ParamId> for ParamNodes {
    type Output = NodeId;
    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

impl ParamNodes {
    /// Binds parameters to arbitrary nodes, in store order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self(ids)
    }

    pub fn as_slice(&self) -> &[NodeId] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; names are fixed by construction code.
    pub fn push(&mut self, name: impl Into<String>, value: Array2, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2 {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn values(&self) -> Vec<Array2> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every value; shapes must match.
    pub fn set_values(&mut self, values: &[Array2]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::dim(
                "set_values",
                format!(
                    "{} values for {} parameters",
                    values.len(),
                    self.entries.len()
                ),
            ));
        }
        for (p, v) in self.entries.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim(
                    "set_values",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Copies every same-named parameter from `other`, checking shapes.
    /// Parameters missing from `other` keep their current value.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for p in &mut self.entries {
            if let Some(src) = other.iter().find(|q| q.name == p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::dim(
                        "load_from",
                        format!(
                            "{}: checkpoint {:?}, model {:?}",
                            p.name,
                            src.value.shape(),
                            p.value.shape()
                        ),
                    ));
                }
                p.value = src.value.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Adds every parameter to `g` as a learnable leaf.
    pub fn register(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes(
            self.entries
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        )
    }
}

/// Uniform in `[−1/√fan_in, 1/√fan_in]`.
pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2 {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}
