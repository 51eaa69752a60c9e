//! Named parameter storage and the small layer wrappers built on it.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered collection of named parameter tensors. Insertion order is the
/// iteration and serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let tensor = tensor.with_requires_grad(true);
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds the gradients reached by a backward pass into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Flat copy of all parameter values in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Flat copy of all gradients (zeros where none accumulated).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for t in &mut self.tensors {
            if offset < t.numel() {
                t.data_mut()[offset] = value;
                return;
            }
            offset -= t.numel();
        }
        panic!("flat parameter index {index} out of range");
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }
}

/// Seeded weight initializer.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, std: f64) -> Self {
        Self { rng, std }
    }

    /// Normal samples truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// Projection weights at the configured standard deviation.
    pub fn projection(&mut self, shape: &[usize]) -> Tensor {
        let std = self.std;
        self.trunc_normal(shape, std)
    }

    /// Convolution weights scaled by fan-in.
    pub fn conv(&mut self, kernel: usize, cin: usize, cout: usize) -> Tensor {
        let std = (2.0 / (kernel * cin) as f64).sqrt();
        self.trunc_normal(&[kernel, cin, cout], std)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// Convolution with bias; `same` padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
}

impl Conv {
    pub fn register(store: &mut ParamStore, init: &mut Init, name: &str, kernel: usize, cin: usize, cout: usize) {
        store.insert(format!("{name}.weight"), init.conv(kernel, cin, cout));
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn bind(tape: &Tape, bound: &Bound, name: &str) -> Result<Self> {
        let weight = bound.get(&format!("{name}.weight"))?;
        let kernel = tape.shape(weight)[0];
        Ok(Self {
            weight,
            bias: bound.get(&format!("{name}.bias"))?,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
        tape.conv1d(x, self.weight, Some(self.bias), stride, self.kernel / 2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

impl Norm {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) {
        store.insert(format!("{name}.gain"), Tensor::full(&[channels], 1.0));
        store.insert(format!("{name}.bias"), Tensor::zeros(&[channels]));
    }

    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(Self {
            gain: bound.get(&format!("{name}.gain"))?,
            bias: bound.get(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, eps)
    }
}

/// `x · W + b` with `W` of shape `in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn register(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) {
        store.insert(format!("{name}.weight"), init.projection(&[cin, cout]));
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(Self {
            weight: bound.get(&format!("{name}.weight"))?,
            bias: bound.get(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}
