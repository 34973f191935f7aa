use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Handle to a parameter array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every trainable array of a model under a unique hierarchical name.
///
/// Modules keep only [`ParamId`]s, so two modules that hold the same id share
/// one storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a new array. Panics on duplicate names: names are fixed by
    /// model construction code, never by user input.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn(shape, || normal.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose names start with any of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|id| prefixes.iter().any(|p| self.names[id.0].starts_with(p)))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrites values by name. Every stored name must be present with a
    /// matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        for (name, id) in &self.index {
            let src = named
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))?;
            if src.dim() != self.values[id.0].dim() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.dim(),
                    self.values[id.0].dim()
                )));
            }
            self.values[id.0].assign(src);
        }
        if named.len() != self.index.len() {
            let extra: Vec<_> = named
                .keys()
                .filter(|k| !self.index.contains_key(*k))
                .cloned()
                .collect();
            return Err(Error::CorruptCheckpoint(format!(
                "unexpected parameters {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.index
            .iter()
            .map(|(name, id)| (name.as_str(), &self.values[id.0]))
    }
}

/// Per-parameter gradients produced by [`crate::autograd::Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Keeps only the listed ids; everything else is dropped.
    pub fn retain(&mut self, keep: &[ParamId]) {
        let mut mask = vec![false; self.grads.len()];
        for id in keep {
            mask[id.0] = true;
        }
        for (slot, keep) in self.grads.iter_mut().zip(mask) {
            if !keep {
                *slot = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
