//! Named, ordered storage for every learnable tensor of a model.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Position of a parameter inside its [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    /// Logical dimensions as written to weight files, e.g. `[out, in, k, k]`
    /// for a kernel, `[c]` for a bias and `[1]` for a scalar weight.
    pub dims: Vec<usize>,
    pub tensor: Tensor<T>,
}

/// Maps logical dimensions to the NCHW storage shape.
pub fn dims_to_shape(dims: &[usize]) -> Result<Shape> {
    match *dims {
        [c] => Ok(Shape::new(1, c, 1, 1)),
        [a, b, c, d] => Ok(Shape::new(a, b, c, d)),
        _ => Err(Error::Format(format!("unsupported parameter rank {}", dims.len()))),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        let shape = dims_to_shape(&dims)?;
        if shape != tensor.shape() {
            return Err(Error::TensorShape { name, expected: shape.dims().to_vec(), found: tensor.shape().dims().to_vec() });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, Param { dims, tensor });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.values_mut().map(|p| &mut p.tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), Param { dims: p.dims.clone(), tensor: p.tensor.cast() }))
            .collect();
        ModelParams { entries }
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self.entries.values().map(|p| tape.leaf(p.tensor.clone(), requires_grad)).collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ModelParams`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// How fresh parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`
    FanIn(usize),
    Const(f64),
}

/// Registers parameters under a hierarchical name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    params: &'a mut ModelParams<f32>,
    rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(params: &'a mut ModelParams<f32>, rng: &'a mut R) -> Self {
        ParamBuilder { params, rng, prefix: Vec::new() }
    }

    /// Run `f` with `name` pushed onto the prefix.
    pub fn scope<V>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<V>) -> Result<V> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn param(&mut self, name: &str, dims: Vec<usize>, init: Init) -> Result<ParamId> {
        let shape = dims_to_shape(&dims)?;
        let tensor = match init {
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -b, b, self.rng)
            }
            Init::Const(v) => Tensor::full(shape, v as f32),
        };
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.params.insert(full, dims, tensor)
    }
}
