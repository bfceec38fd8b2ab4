//! Named parameter storage, initialization and tape binding.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of every learnable tensor in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn scalar_count_under(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::shape("load_params", value.shape(), src.shape()));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// First parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.full_name(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        *self.store.get_mut(id) = value;
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            if bound > 0.0 {
                T::lit(rng.gen_range(-bound..bound))
            } else {
                T::zero()
            }
        });
        self.tensor(name, t)
    }

    pub fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut s = self.scope(name);
        let weight = s.uniform("weight", &[fan_in, fan_out], bound)?;
        let bias = if bias {
            Some(s.uniform("bias", &[fan_out], bound)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNormParams> {
        let mut s = self.scope(name);
        Ok(LayerNormParams {
            gamma: s.tensor("gamma", Tensor::full([dim], T::one()))?,
            beta: s.tensor("beta", Tensor::zeros([dim]))?,
        })
    }
}

/// Affine map `x W + b` on `[M, fan_in]` rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = x.matmul(b.var(self.weight))?;
        match self.bias {
            Some(bias) => y.add(b.var(bias)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.layer_norm(b.var(self.gamma), b.var(self.beta))
    }
}

/// Lazily records parameters from a store onto a tape.
///
/// Only parameters touched by the forward pass are copied onto the tape,
/// so unselected experts cost nothing.
pub struct Binder<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, 's, T: Scalar> Binder<'t, 's, T> {
    /// Parameters become gradient-carrying leaves.
    pub fn trainable(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters become constants (evaluation only).
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, false)
    }

    /// Uses the given tape values in place of every stored parameter, in
    /// store order. Lets gradient checks treat parameters as inputs.
    pub fn with_vars(
        tape: &'t Tape<T>,
        store: &'s ParamStore<T>,
        vars: &[Var<'t, T>],
    ) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::contract(format!(
                "expected {} parameter vars, got {}",
                store.len(),
                vars.len()
            )));
        }
        let b = Self::with_mode(tape, store, true);
        *b.bound.borrow_mut() = vars.iter().copied().map(Some).collect();
        Ok(b)
    }

    fn with_mode(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.param(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Gradient per parameter, zero for parameters the pass never touched.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec()))
            })
            .collect()
    }

    /// Number of distinct parameters recorded so far.
    pub fn bound_count(&self) -> usize {
        self.bound.borrow().iter().filter(|b| b.is_some()).count()
    }
}
