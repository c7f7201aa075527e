use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named, ordered collection of learnable `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument {
                op: "param_set",
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`; `trainable` decides whether they
    /// collect gradients or act as constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.cast(), trainable)).collect();
        Bound {
            names: self.names.clone(),
            vars,
            index: self.index.clone(),
        }
    }

    /// True when both sets hold the same names, shapes, and bit patterns.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Wraps vars created elsewhere (e.g. by a gradient checker) in parameter order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            names: names.to_vec(),
            vars: vars.to_vec(),
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument {
                op: "bound_params",
                detail: format!("no parameter named `{name}`"),
            })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    names: Vec<String>,
    grads: Vec<Option<Tensor<f32>>>,
}

impl ParamGrads {
    pub fn from_tape<T: Scalar>(bound: &Bound, grads: &Gradients<T>) -> Self {
        Self {
            names: bound.names.clone(),
            grads: bound.vars.iter().map(|v| grads.get(*v).map(Tensor::cast)).collect(),
        }
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            names: params.names.clone(),
            grads: params.tensors.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        let i = self.names.iter().position(|n| n == name)?;
        self.grads[i].as_ref()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        let i = self.names.iter().position(|n| n == name)?;
        self.grads[i].as_mut()
    }

    pub(crate) fn slots(&self) -> impl Iterator<Item = (&str, Option<&Tensor<f32>>)> {
        self.names.iter().map(String::as_str).zip(self.grads.iter().map(Option::as_ref))
    }

    /// Elementwise accumulation; a missing entry on either side stays missing
    /// only if it is missing on both.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(-b, b) with b = sqrt(6 / fan_in); layers feeding relu / leaky relu.
    HeUniform,
    /// U(-b, b) with b = sqrt(6 / (fan_in + fan_out)); linear, sigmoid, tanh heads.
    XavierUniform,
    Constant(f32),
}

pub fn init_tensor<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let bound = match init {
        Init::Constant(c) => return Tensor::full(shape, c),
        Init::HeUniform => (6.0 / fan_in.max(1) as f64).sqrt(),
        Init::XavierUniform => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
    };
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}
