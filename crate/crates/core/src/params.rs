//! Flat parameter storage addressed by [`ParamId`].
//!
//! Every trainable tensor of a model lives in one [`ParamStore`]; layers hold
//! ids into it. Gradients, optimizer moments and checkpoints all walk the
//! same entry list, which keeps them aligned by construction.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Trainable tensor whose freeze flag is set; receives no gradient.
    Frozen,
    /// Non-gradient state, e.g. router balance biases.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn receives_grad(&self) -> bool {
        self.kind == ParamKind::Trainable
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.push(name, Mat::from_vec(rows, cols, data), ParamKind::Trainable)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.push(name, Mat::zeros(rows, cols), ParamKind::Trainable)
    }

    pub fn ones(&mut self, name: impl Into<String>, cols: usize) -> ParamId {
        self.push(
            name,
            Mat::from_vec(1, cols, vec![1.0; cols]),
            ParamKind::Trainable,
        )
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn set_kind(&mut self, id: ParamId, kind: ParamKind) {
        self.entries[id.0].kind = kind;
    }

    pub fn receives_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].receives_grad()
    }

    /// Number of scalars in entries whose name satisfies `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer && filter(&e.name))
            .map(|e| e.value.data.len())
            .sum()
    }

    /// Zero-valued gradient buffers shaped like this store.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self
                .entries
                .iter()
                .map(|e| {
                    if e.receives_grad() {
                        vec![0.0; e.value.data.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`]. Entries that do not receive
/// gradients hold an empty vector, so frozen tables can never be written.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    /// Mutable gradient slice, or `None` when the parameter is frozen.
    #[inline]
    pub fn slot(&mut self, id: ParamId) -> Option<&mut [f64]> {
        let g = &mut self.data[id.0];
        if g.is_empty() {
            None
        } else {
            Some(g.as_mut_slice())
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.data.iter()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Adds `m` (same shape as the parameter) into a gradient slot if present.
pub fn accumulate(grads: &mut Grads, id: ParamId, m: &Mat) {
    if let Some(g) = grads.slot(id) {
        for (a, b) in g.iter_mut().zip(&m.data) {
            *a += b;
        }
    }
}
