use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Param<T> {
    name: String,
    rows: usize,
    cols: usize,
    data: Arc<Vec<T>>,
}

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows: value.rows,
            cols: value.cols,
            data: Arc::new(value.data),
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> [usize; 2] {
        let p = &self.params[id.0];
        [p.rows, p.cols]
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    /// Mutable access; copies only if a tape still shares the buffer.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        Arc::make_mut(&mut self.params[id.0].data).as_mut_slice()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`, indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(p.rows, p.cols, Arc::clone(&p.data)))
            .collect()
    }

    pub fn to_entries(&self) -> Vec<ParamEntry> {
        self.params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: [p.rows, p.cols],
                values: p.data.iter().map(|x| x.as_f64()).collect(),
            })
            .collect()
    }

    /// Overwrites values from checkpoint entries; names and shapes must match exactly.
    pub fn load_entries(&mut self, entries: &[ParamEntry]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                found: entries.len(),
                context: "number of checkpoint parameters".into(),
            });
        }
        for (p, e) in self.params.iter_mut().zip(entries) {
            if p.name != e.name {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{}` found where `{}` was expected",
                    e.name, p.name
                )));
            }
            if e.shape != [p.rows, p.cols] || e.values.len() != p.rows * p.cols {
                return Err(Error::DimensionMismatch {
                    expected: p.rows * p.cols,
                    found: e.values.len(),
                    context: format!("parameter `{}` shape {:?} vs {:?}", p.name, e.shape, [p.rows, p.cols]),
                });
            }
            if e.values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("parameter `{}` has non-finite values", p.name)));
            }
            p.data = Arc::new(e.values.iter().map(|&x| T::lit(x)).collect());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Versioned parameter snapshot with the configuration that built it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub version: u32,
    pub precision: String,
    pub config: C,
    pub params: Vec<ParamEntry>,
}
