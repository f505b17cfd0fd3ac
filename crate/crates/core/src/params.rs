//! Flat named parameter registry and its binding onto a tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ops::NormMode;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Dims, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics; saved with the weights but never differentiated.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    /// Logical shape as written to weight files, e.g. `[out, in]` for a
    /// fully connected layer. The tensor holds the rank-4 layout.
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Rank-4 layout used for a logical parameter shape.
pub fn layout_for(shape: &[usize]) -> Result<Dims> {
    match *shape {
        [c] => Ok([1, c, 1, 1]),
        [m, k] => Ok([1, m, k, 1]),
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::InvalidArgument(format!(
            "unsupported parameter rank {} ({shape:?})",
            shape.len()
        ))),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let dims = layout_for(shape)?;
        if value.dims() != dims {
            return Err(Error::shape(
                "param_store",
                format!("`{name}`: value {:?} does not match shape {shape:?}", value.dims()),
            ));
        }
        self.by_name.insert(name.to_owned(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_owned(),
            shape: shape.to_vec(),
            kind,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Kaiming-uniform weight with bound `sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dims = layout_for(shape)?;
        let value = Tensor::from_fn(dims, |_| rng.uniform(-bound, bound));
        self.add(name, shape, ParamKind::Learnable, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], kind: ParamKind, v: f64) -> Result<ParamId> {
        let dims = layout_for(shape)?;
        self.add(name, shape, kind, Tensor::full(dims, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Learnable)
    }

    pub fn num_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(ParamEntry::numel)
            .sum()
    }

    /// Folds batch statistics from a train-mode forward into the running buffers.
    pub fn apply_running_stats(&mut self, graph: &Graph) {
        for up in graph.tape.stat_updates() {
            for (var, batch) in [(up.running_mean, &up.batch_mean), (up.running_var, &up.batch_var)] {
                let id = graph.param_of(var).expect("running stats are bound parameters");
                let buf = self.entries[id.0].value.data_mut();
                for (r, b) in buf.iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// A tape with every parameter of a store bound as a leaf, plus the
/// normalization mode for this forward pass.
#[derive(Debug)]
pub struct Graph {
    pub tape: Tape,
    pub mode: NormMode,
    vars: Vec<Var>,
}

impl Graph {
    pub fn new(store: &ParamStore, mode: NormMode) -> Self {
        Self::with_tape(Tape::new(), store, mode)
    }

    pub fn with_tape(mut tape: Tape, store: &ParamStore, mode: NormMode) -> Self {
        let vars = store.entries.iter().map(|e| tape.leaf(e.value.clone())).collect();
        Graph { tape, mode, vars }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.vars.binary_search(&v).ok().map(ParamId)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Learnable affine and running statistics of one batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BnParams {
            gamma: store.constant(&format!("{prefix}.weight"), &[channels], ParamKind::Learnable, 1.0)?,
            beta: store.constant(&format!("{prefix}.bias"), &[channels], ParamKind::Learnable, 0.0)?,
            running_mean: store.constant(&format!("{prefix}.running_mean"), &[channels], ParamKind::Buffer, 0.0)?,
            running_var: store.constant(&format!("{prefix}.running_var"), &[channels], ParamKind::Buffer, 1.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mode = g.mode;
        let (gamma, beta, rm, rv) = (g.p(self.gamma), g.p(self.beta), g.p(self.running_mean), g.p(self.running_var));
        g.tape.batch_norm(x, gamma, beta, rm, rv, mode, BN_EPS)
    }
}
