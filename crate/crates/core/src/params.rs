//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: Arc::new(HashMap::new()),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let index = Arc::make_mut(&mut self.index);
        if let Some(&i) = index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a leaf. `trainable` leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    /// Binds `store`'s names to externally created leaves, in store order.
    pub fn from_vars<T: Scalar>(store: &ParamStore<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(
                "params",
                format!("{} vars for {} parameters", vars.len(), store.len()),
            ));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: store.index.clone(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid("params", format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let x: f64 = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            break T::from_f64_lossy(x);
        }
    })
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(dist.sample(rng)))
}

/// Affine map `x · W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        store.insert(format!("{name}.weight"), trunc_normal(&[fan_in, fan_out], 0.02, rng));
        store.insert(format!("{name}.bias"), Tensor::zeros([fan_out]));
    }

    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: bound.var(&format!("{name}.weight"))?,
            bias: bound.var(&format!("{name}.bias"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_broadcast(h, self.bias)
    }
}

/// Layer norm with learned scale and offset.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub scale: Var,
    pub offset: Var,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
        store.insert(format!("{name}.scale"), Tensor::ones([dim]));
        store.insert(format!("{name}.offset"), Tensor::zeros([dim]));
    }

    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(LayerNorm {
            scale: bound.var(&format!("{name}.scale"))?,
            offset: bound.var(&format!("{name}.offset"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, T::from_f64_lossy(LN_EPS));
        let s = tape.mul_broadcast(n, self.scale)?;
        tape.add_broadcast(s, self.offset)
    }
}
