//! Named parameter storage with freeze flags and optimizer groups.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{NodeId, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Which learning-rate group a tensor belongs to. `Graph` covers the
/// graph encoder weights, `Embedding` the prompt and embedding tables
/// trained at a high learning rate, `Backbone` the frozen transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Graph,
    Embedding,
    Backbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Rc<ArrayD<S>>,
    pub group: ParamGroup,
    pub frozen: bool,
}

/// Flat registry of all model tensors, ordered by registration.
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: ArrayD<S>,
        group: ParamGroup,
        frozen: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            value: Rc::new(value),
            group,
            frozen,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> Rc<ArrayD<S>> {
        Rc::clone(&self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<S>) {
        let p = &mut self.params[id.0];
        assert_eq!(
            p.value.shape(),
            value.shape(),
            "parameter {} shape change",
            p.name
        );
        p.value = Rc::new(value);
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    /// Bind every parameter onto a tape. Frozen tensors become plain
    /// constants; trainable ones request gradients.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(Rc::clone(&p.value), !p.frozen))
            .collect();
        Binding { nodes }
    }
}

/// Map from [`ParamId`] to the tape node carrying that parameter.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

// ---- initializers -------------------------------------------------------

pub fn init_normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<S> {
    let dist = Normal::new(0.0f64, std).expect("std must be positive");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || S::from_f64(dist.sample(rng)))
}

pub fn init_uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<S> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || S::from_f64(rng.gen_range(-bound..bound)))
}

pub fn init_zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn init_ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(shape), S::one())
}

/// Glorot-style uniform initialization for a 2-D weight.
pub fn init_xavier<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> ArrayD<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    init_uniform(rng, &[rows, cols], bound)
}
