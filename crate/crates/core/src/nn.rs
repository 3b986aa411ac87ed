//! Named parameter storage and the small set of layers shared by the encoders.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{HtclError, Result};
use crate::scalar::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU, evaluated as `x·σ(2u)` which equals `0.5x(1 + tanh u)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    s + (x + x) * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Parameters keyed by stable dotted names, e.g. `audio.block0.attn.wq`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| HtclError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Scalars in tensors whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Moves every tensor of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn into_inner(self) -> BTreeMap<String, Array2<T>> {
        self.tensors
    }
}

impl<T: Scalar> FromIterator<(String, Array2<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Array2<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Places parameters on a tape on first use and remembers the resulting handles.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Binds parameters as constants, for inference-only passes.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            bound: HashMap::new(),
            trainable: false,
        }
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// `x W + b` with parameters `{prefix}.weight` (in x out) and `{prefix}.bias` (1 x out).
    pub fn linear(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(tape, &format!("{prefix}.weight"))?;
        let b = self.var(tape, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }

    pub fn layer_norm(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.var(tape, &format!("{prefix}.gamma"))?;
        let b = self.var(tape, &format!("{prefix}.beta"))?;
        Ok(tape.layer_norm(x, g, b, T::lit(1e-5)))
    }
}

/// Registers `{prefix}.weight` with uniform fan-in/fan-out scaling and a zero `{prefix}.bias`.
pub fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.gen_range(-bound..bound)));
    store.insert(format!("{prefix}.weight"), w);
    store.insert(format!("{prefix}.bias"), Array2::zeros((1, fan_out)));
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Array2::ones((1, dim)));
    store.insert(format!("{prefix}.beta"), Array2::zeros((1, dim)));
}

pub fn init_normal<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_fn((rows, cols), |_| T::lit(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990).abs() < 1e-6);
        assert!((gelu(-1.0f64) + 0.158_808_009).abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_derivative(x) - numeric).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn missing_parameter_is_named() {
        let store = ParamStore::<f32>::new();
        let err = store.get("audio.proj.weight").unwrap_err();
        assert!(err.to_string().contains("audio.proj.weight"));
    }
}
