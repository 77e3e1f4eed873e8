use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::lmdf::Lmdf;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered set of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn write_into(&self, file: &mut Lmdf, prefix: &str) {
        for (_, name, t) in self.iter() {
            file.push(format!("{prefix}{name}"), t);
        }
    }

    /// Overwrites every parameter from `file`, requiring exact shape agreement.
    pub fn read_from(&mut self, file: &Lmdf, prefix: &str) -> Result<()> {
        for i in 0..self.values.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let t: Tensor<T> = file.tensor(&key)?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Shape {
                    op: "load checkpoint",
                    detail: format!(
                        "`{key}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        self.values[i].shape()
                    ),
                });
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Registers freshly initialized parameters under full dotted names.
enum Target<'a, T> {
    Store(&'a mut ParamStore<T>),
    Shapes(&'a mut Vec<(String, Vec<usize>)>),
}

/// Parameter initializer. Writes into a [`ParamStore`], or with
/// [`Init::shapes_only`] records names and shapes without allocating.
pub struct Init<'a, T> {
    target: Target<'a, T>,
    pub rng: &'a mut Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self {
            target: Target::Store(store),
            rng,
        }
    }

    pub fn shapes_only(manifest: &'a mut Vec<(String, Vec<usize>)>, rng: &'a mut Rng) -> Self {
        Self {
            target: Target::Shapes(manifest),
            rng,
        }
    }

    fn add_with(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        make: impl FnOnce(&mut Rng) -> Tensor<T>,
    ) -> Result<ParamId> {
        match &mut self.target {
            Target::Store(store) => store.add(name, make(self.rng)),
            Target::Shapes(list) => {
                list.push((name.into(), shape.to_vec()));
                Ok(ParamId(list.len() - 1))
            }
        }
    }

    /// Mutates an already created parameter; does nothing in shapes-only mode.
    pub fn edit(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor<T>)) {
        if let Target::Store(store) = &mut self.target {
            f(store.get_mut(id));
        }
    }

    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let shape = value.shape().to_vec();
        self.add_with(name, &shape, |_| value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add_with(name, shape, |_| Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add_with(name, shape, |_| Tensor::full(shape, T::lit(value)))
    }

    /// Uniform on `[-bound, bound)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<ParamId> {
        self.add_with(name, shape, |rng| {
            let u: Tensor<T> = rng.uniform(shape);
            let b = T::lit(bound);
            u.map(|v| (v + v - T::one()) * b)
        })
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<ParamId> {
        self.add_with(name, shape, |rng| {
            let n: Tensor<T> = rng.normal(shape);
            n.scale(T::lit(std))
        })
    }

    /// `[din, dout]` weight with bound `1 / sqrt(din)`.
    pub fn linear(&mut self, name: impl Into<String>, din: usize, dout: usize) -> Result<ParamId> {
        self.uniform(name, &[din, dout], 1.0 / (din as f64).sqrt())
    }
}
