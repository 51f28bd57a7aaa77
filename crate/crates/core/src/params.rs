use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use splm_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{invalid, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Uniform on `[-a, a]`.
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T> Param<T> {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

/// Ordered, named collection of model tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    seed: u64,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Empty store; `seed` keys the per-parameter init streams.
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, trainable: bool) -> Result<ParamId> {
        if self.by_name(name).is_some() {
            return invalid(format!("duplicate parameter name {name}"));
        }
        let n: usize = shape.iter().product();
        let mut r = rng::named(self.seed, "param", name);
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(v) => vec![T::of(v); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
                (0..n).map(|_| T::of(d.sample(&mut r))).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| T::of(r.random_range(-a..=a))).collect(),
        };
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = trainable;
        self.params.push(Param { name: name.to_string(), tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a parameter with explicit values.
    pub fn add_data(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name(name).is_some() {
            return invalid(format!("duplicate parameter name {name}"));
        }
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = trainable;
        self.params.push(Param { name: name.to_string(), tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.tensor.len()).sum()
    }

    /// Pushes every parameter as a leaf; trainable ones track gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(&p.tensor)).collect())
    }

    /// Pushes every parameter as a constant (evaluation).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.constant(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("stored shapes are valid"))
                .collect(),
        )
    }

    /// Adds the tape gradients of every trainable parameter into its accumulator.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if !p.trainable() {
                continue;
            }
            match g.grad(v) {
                Some(grad) => p.tensor.accumulate_grad(grad),
                None => {
                    let zeros = vec![T::zero(); p.tensor.len()];
                    p.tensor.accumulate_grad(&zeros);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Overwrites the values of a parameter (shape must match).
    pub fn set(&mut self, id: ParamId, data: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.len() != data.len() {
            return invalid(format!("{} holds {} values, got {}", p.name, p.tensor.len(), data.len()));
        }
        p.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }
}
