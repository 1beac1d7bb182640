//! Named parameter tensors with gradient slots.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffops::{Tape, Var};
use crate::error::{config_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter initialization rules.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    /// Uniform in ±bound.
    Uniform(f64),
}

impl Init {
    pub fn sample<T: Real>(self, dims: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::full(dims, T::one()),
            Init::TruncNormal(std) => Tensor::from_fn(dims, |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            }),
            Init::Uniform(bound) => Tensor::from_fn(dims, |_| T::lit(rng.gen_range(-bound..=bound))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every parameter of a store, in id order.
pub struct ParamVars(Vec<Var>);

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return config_err(name, "duplicate parameter name");
        }
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.grads.push(None);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Register every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.ids().map(|id| tape.param(id, Arc::clone(&self.values[id.0]))).collect())
    }

    pub fn set_grads(&mut self, grads: Vec<Option<Tensor<T>>>) {
        assert_eq!(grads.len(), self.len(), "one gradient slot per parameter");
        self.grads = grads;
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Same names and ids, values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            grads: self.names.iter().map(|_| None).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy values for every name present in both stores whose name starts
    /// with `prefix`. Shapes must agree.
    pub fn load_matching(&mut self, src: &[(String, Tensor<T>)], prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, value) in src.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let Some(id) = self.id(name) else {
                return config_err(name, "parameter not present in the model");
            };
            if self.get(id).dims() != value.dims() {
                return config_err(
                    name,
                    format!("shape {:?} does not match model {:?}", value.dims(), self.get(id).dims()),
                );
            }
            *self.get_mut(id) = value.clone();
            n += 1;
        }
        Ok(n)
    }

    /// `(name, value)` pairs in id order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }
}

/// Registers freshly initialized parameters under a dotted name prefix.
pub struct Builder<'a, T: Real, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn add(&mut self, name: &str, dims: &[usize], init: Init) -> Result<ParamId> {
        let value = init.sample(dims, self.rng);
        self.store.add(&format!("{}.{name}", self.prefix), value)
    }

    /// A builder for a nested scope sharing the same store and rng.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T, R> {
        Builder { store: self.store, rng: self.rng, prefix: format!("{}.{name}", self.prefix) }
    }
}
