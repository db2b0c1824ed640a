use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name '{name}'")));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| invalid(format!("no parameter named '{name}'")))?;
        self.trainable[i] = trainable;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on the tape. With `train`, trainable tensors become
    /// differentiable leaves; otherwise everything is a constant.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> Result<Vec<Var>> {
        self.values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &tr)| {
                if train && tr {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| invalid(format!("no parameter named '{name}'")))?;
        if self.values[i].shape() != value.shape() {
            return Err(crate::Error::ShapeMismatch {
                op: "load parameter",
                lhs: self.values[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[i] = value;
        Ok(())
    }
}

/// Registers freshly initialised parameters. Weights and biases are uniform in
/// `+-1/sqrt(fan_in)`; norm scales start at 1 and shifts at 0.
pub struct ParamBuilder {
    store: ParamStore<f64>,
    rng: RngStream,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: RngStream::keyed(&[0x696e_6974, seed]),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut rng = self.rng.split(self.store.len() as u64);
        let t = Tensor::from_fn(shape, |_| (2.0 * rng.uniform() - 1.0) * bound);
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value), true)
    }

    pub fn finish<T: Real>(self) -> ParamStore<T> {
        self.store.cast()
    }
}
