//! Named parameter arrays, their binding onto a [`Tape`], and the Adam
//! optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};

/// Parameters keyed by hierarchical name (`backbone/token_table`,
/// `graph/layer0/Wg`, ...). Iteration order is lexicographic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Array2<f64>>,
}

/// Serialized form of a single array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.arrays.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.arrays.get_mut(name)
    }

    /// Panics on a missing name; used where the model layout guarantees it.
    pub fn expect(&self, name: &str) -> &Array2<f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Array2::len).sum()
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedArray> {
        self.arrays
            .iter()
            .map(|(k, v)| {
                let (r, c) = v.dim();
                (
                    k.clone(),
                    NamedArray {
                        shape: [r, c],
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect()
    }

    pub fn from_named(named: BTreeMap<String, NamedArray>) -> Result<Self> {
        let mut arrays = BTreeMap::new();
        for (k, v) in named {
            let arr = Array2::from_shape_vec((v.shape[0], v.shape[1]), v.data)
                .map_err(|e| Error::Checkpoint(format!("array `{k}`: {e}")))?;
            arrays.insert(k, arr);
        }
        Ok(Self { arrays })
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter name → tape node, for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients for every bound parameter; parameters that did not
    /// reach the seed get zeros.
    pub fn collect(&self, tape: &Tape, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Array2::zeros(tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Glorot-uniform matrix.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// In-place arithmetic helpers used for gradient accumulation.
impl ParamStore {
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (k, v) in &other.arrays {
            match self.arrays.get_mut(k) {
                Some(mine) => *mine += v,
                None => {
                    self.arrays.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.arrays.values_mut() {
            v.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
