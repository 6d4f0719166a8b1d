//! Named parameter storage and tape binding.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initialization
//! draws from a per-name stream derived from the store seed, so adding or
//! reordering declarations never shifts other parameters' values.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on (-scale, scale).
    Uniform(f64),
    /// Normal(0, std) via Box-Muller.
    Normal(f64),
    /// Uniform Xavier for a `fan_in x fan_out` weight.
    Xavier,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    seed: u64,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates the parameter if absent; re-declaration must agree on shape.
    pub fn declare(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<(), TensorError> {
        if let Some(existing) = self.params.get(name) {
            if existing.rows() != rows || existing.cols() != cols {
                return Err(TensorError::InvalidArg {
                    op: "declare",
                    msg: format!(
                        "parameter {name} re-declared as {rows}x{cols}, stored {}",
                        existing.shape()
                    ),
                });
            }
            return Ok(());
        }
        let mut t = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().fill(T::ONE),
            Init::Const(c) => t.data_mut().fill(T::from_f64(c)),
            Init::Uniform(scale) => {
                let mut rng = stream(self.seed, name);
                for v in t.data_mut() {
                    *v = T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * scale);
                }
            }
            Init::Normal(std) => {
                let mut rng = stream(self.seed, name);
                for v in t.data_mut() {
                    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    let u2: f64 = rng.random();
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    *v = T::from_f64(z * std);
                }
            }
            Init::Xavier => {
                let scale = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = stream(self.seed, name);
                for v in t.data_mut() {
                    *v = T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * scale);
                }
            }
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in lexicographic order; this order is the serialization order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// Per-tape view of a [`ParamStore`]: lazily introduces each requested
/// parameter as a leaf and remembers the binding so gradients can be
/// collected by name after backward.
pub struct Binder<'s, 't, T: Scalar> {
    store: &'s ParamStore<T>,
    tape: &'t Tape<T>,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'s, 't, T: Scalar> Binder<'s, 't, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Binder {
            store,
            tape,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>, TensorError> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.tape.leaf(t.clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Pins a name to an existing tape node instead of the stored value.
    /// Gradient checkers use this to treat parameters as checkable inputs.
    pub fn preset(&self, name: &str, var: Var<'t, T>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    /// Adds every bound parameter's gradient into `accum`. Parameters the
    /// loss did not reach contribute nothing.
    pub fn collect(&self, grads: &Gradients<T>, accum: &mut GradAccum<T>) {
        for (name, var) in self.bound.borrow().iter() {
            if let Some(g) = grads.wrt(*var) {
                accum.add(name, g);
            }
        }
    }
}

/// Named gradient accumulator for batched updates.
#[derive(Default)]
pub struct GradAccum<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradAccum<T> {
    pub fn new() -> Self {
        GradAccum {
            map: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, g: &Tensor<T>) {
        match self.map.get_mut(name) {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Scales every accumulated gradient, e.g. by 1/batch for a mean.
    pub fn scale(&mut self, s: T) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::<f32>::new(11);
        a.declare("w1", 2, 3, Init::Xavier).unwrap();
        a.declare("w2", 2, 3, Init::Xavier).unwrap();
        let mut b = ParamStore::<f32>::new(11);
        b.declare("w2", 2, 3, Init::Xavier).unwrap();
        b.declare("w1", 2, 3, Init::Xavier).unwrap();
        assert_eq!(a.get("w1"), b.get("w1"));
        assert_eq!(a.get("w2"), b.get("w2"));
    }

    #[test]
    fn redeclare_same_shape_keeps_values() {
        let mut s = ParamStore::<f32>::new(3);
        s.declare("w", 2, 2, Init::Xavier).unwrap();
        let orig = s.get("w").unwrap().clone();
        s.declare("w", 2, 2, Init::Zeros).unwrap();
        assert_eq!(s.get("w").unwrap(), &orig);
        assert!(s.declare("w", 3, 2, Init::Zeros).is_err());
    }

    #[test]
    fn binder_collects_gradients_by_name() {
        let mut s = ParamStore::<f64>::new(1);
        s.declare("w", 1, 2, Init::Ones).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let w = b.var("w").unwrap();
        let loss = w.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut acc = GradAccum::new();
        b.collect(&grads, &mut acc);
        assert_eq!(acc.get("w").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn unknown_param_is_an_error() {
        let s = ParamStore::<f64>::new(1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        assert!(b.var("nope").is_err());
    }
}
