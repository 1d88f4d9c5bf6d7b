//! Named trainable tensors shared by layers, the optimizer and checkpoints.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Graph, Real, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors. Registration order is the
/// canonical order used by optimizers and checkpoint files.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles for a store's parameters in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value.as_standard_layout().into_owned());
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform tensor in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::from_f64(rng.random_range(-limit..limit))
        });
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound, TensorError> {
        self.values
            .iter()
            .map(|v| g.variable(v.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map(Bound)
    }

    /// Gradients of every parameter after a backward pass; parameters the
    /// loss did not reach get zeros.
    pub fn collect_grads(&self, g: &mut Graph<T>, bound: &Bound) -> Vec<ArrayD<T>> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| ArrayD::zeros(p.raw_dim())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        let w = s.add_glorot("w", &[2, 3], 2, 3, &mut rng);
        let b = s.add_zeros("b", &[3]);
        assert_eq!(s.num_scalars(), 9);
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(s.get(w).iter().all(|v| v.abs() <= limit));
        assert!(s.get(b).iter().all(|&v| v == 0.0));
        assert_eq!(s.names(), &["w".to_string(), "b".to_string()]);
    }
}
