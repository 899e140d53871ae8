use std::collections::HashMap;

use ndarray::ArrayD;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat, ordered, named list of parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bit pattern digest of all parameters whose name satisfies `filter`.
    /// Used to assert that a step left a parameter group untouched.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (_, name, value) in self.iter() {
            if filter(name) {
                feed(name.as_bytes());
                for v in value.iter() {
                    feed(&v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

/// Parameters copied into a graph, tracked or constant according to a
/// name filter.
pub struct Bound {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Bound {
    pub fn new(graph: &mut Graph, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut vars = Vec::with_capacity(store.len());
        let mut flags = Vec::with_capacity(store.len());
        for (_, name, value) in store.iter() {
            let train = trainable(name);
            let v = if train {
                graph.param(value.clone())?
            } else {
                graph.constant(value.clone())?
            };
            vars.push(v);
            flags.push(train);
        }
        Ok(Self {
            vars,
            trainable: flags,
        })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of the trainable parameters after [`Graph::backward`];
    /// `None` for constants and for parameters the loss did not reach.
    pub fn grads(&self, graph: &Graph) -> Vec<Option<ArrayD<f64>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if t { graph.grad(*v).map(|g| g.as_standard_layout().into_owned()) } else { None })
            .collect()
    }
}
