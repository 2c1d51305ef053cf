//! Named parameter tables shared by the encoders, the classifier head and
//! the optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Result, SvtError};
use crate::tensor::Matrix;

/// All trainable tensors, keyed by stable dotted names
/// (`vision.blocks.0.attn.q.weight`, `text.proj.fc.bias`, `head.weight`, ...).
///
/// Iteration order is lexicographic by name, which fixes checkpoint layout and
/// checksum order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| SvtError::Shape(format!("missing parameter tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| SvtError::Shape(format!("missing parameter tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.tensors.iter().find(|(_, m)| !m.is_finite()) {
            Some((name, _)) => Err(name.clone()),
            None => Ok(()),
        }
    }

    pub fn shape_table(&self) -> Vec<ShapeEntry> {
        self.tensors
            .iter()
            .map(|(name, m)| ShapeEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
            })
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles for a [`ParamStore`] bound with [`ParamStore::bind`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SvtError::Shape(format!("missing parameter tensor {name}")))
    }

    /// Collects adjoints into a store shaped like `params`; tensors the
    /// output does not depend on get zeros.
    pub fn gradients(&self, grads: &Gradients, params: &ParamStore) -> ParamStore {
        let mut out = params.zeros_like();
        for (name, var) in &self.vars {
            if let (Some(g), Some(slot)) = (grads.get(*var), out.tensors.get_mut(name)) {
                *slot = g.clone();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: [usize; 2],
}

impl ShapeEntry {
    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

/// Parameter totals reported for the model-size comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    pub scalars: usize,
    /// Size when stored as float32: `scalars × 4 / 2^20`.
    pub megabytes: f64,
}

pub fn count_parameters(params: &ParamStore) -> ParamCount {
    let scalars = params.iter().map(|(_, m)| m.len()).sum();
    ParamCount {
        scalars,
        megabytes: scalars as f64 * 4.0 / (1u64 << 20) as f64,
    }
}

/// Weight-initialization helpers. Every tensor draws from one seeded stream
/// in construction order.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Initializer { rng }
    }

    /// uniform(-1/√fan_in, 1/√fan_in), where fan_in is the row count.
    pub fn weight(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(fan_in, fan_out, bound)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    }

    /// Dense `fan_in × fan_out` layer as `<prefix>.weight` and `<prefix>.bias`.
    pub fn linear(&mut self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
        store.insert(format!("{prefix}.weight"), self.weight(fan_in, fan_out));
        store.insert(format!("{prefix}.bias"), Matrix::zeros(1, fan_out));
    }

    pub fn norm(&mut self, store: &mut ParamStore, prefix: &str, dim: usize) {
        store.insert(format!("{prefix}.scale"), Matrix::filled(1, dim, 1.0));
        store.insert(format!("{prefix}.offset"), Matrix::zeros(1, dim));
    }
}

/// `x · W + b` with the tensors named `<prefix>.weight` / `<prefix>.bias`.
pub fn linear(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = bound.var(&format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}
