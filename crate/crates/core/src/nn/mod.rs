//! Trainable parameter storage, initialization, and the two networks:
//! the mean-velocity backbone and the mixing-ratio regressor.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::{Error, Result};

pub mod backbone;
pub mod checkpoint;
pub mod mr;

pub use backbone::{MeanVelocityNet, PredictorConfig};
pub use mr::{MixRatioNet, MrConfig};

/// A flat, ordered collection of named parameter tensors.
///
/// Insertion order is the canonical order; it is what the checkpoint
/// container and the optimizer state follow.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        if !value.iter().all(|v| v.is_finite()) {
            panic!("non-finite init for parameter {name}");
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Inserts every tensor into `tape` as a leaf.
    ///
    /// With `trainable = false` the leaves are constants, which is the
    /// stop-gradient / frozen-teacher evaluation mode.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut ids = HashMap::with_capacity(self.entries.len());
        for (name, value) in &self.entries {
            ids.insert(name.clone(), tape.leaf(value.clone(), trainable));
        }
        BoundParams { ids }
    }

    /// Zero-valued clone with the same names/shapes (gradient accumulator).
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in &self.entries {
            out.insert(name.clone(), Array2::zeros(value.dim()));
        }
        out
    }

    /// Elementwise in-place: self += other * scale.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        assert_eq!(self.len(), other.len(), "param store mismatch");
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            *a += &(b * scale);
        }
    }

    /// Global L2 norm over all tensors.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for (_, v) in self.entries.iter_mut() {
            *v *= c;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Tape bindings of a [`ParamStore`], looked up by name.
pub struct BoundParams {
    ids: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

/// Xavier-uniform weight matrix.
pub fn xavier_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

/// Sinusoidal embedding of a scalar in [0, 1], shape (1, dim).
///
/// The scalar is scaled by 1000 before the usual interleaved sin/cos
/// encoding so nearby times stay distinguishable.
pub fn sinusoidal_embedding(x: f64, dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let scaled = x * 1000.0;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        out[[0, 2 * i]] = (scaled * freq).sin();
        out[[0, 2 * i + 1]] = (scaled * freq).cos();
    }
    out
}

/// Evaluates `build` on a tape with trainable bindings and returns the
/// scalar loss plus gradients shaped like `params`.
///
/// Errors if the loss comes out non-finite, naming the loss value.
pub fn gradient<F>(params: &ParamStore, build: F) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Tape, &BoundParams) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss_id = build(&mut tape, &bound)?;
    let loss = tape.scalar(loss_id);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss value {loss}")));
    }
    let grads = tape.backward(loss_id);
    let mut out = ParamStore::new();
    for (name, _) in params.iter().map(|(n, v)| (n.to_string(), v)) {
        let g = grads.wrt(&tape, bound.id(&name));
        out.insert(name, g);
    }
    Ok((loss, out))
}
