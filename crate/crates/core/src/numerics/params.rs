use std::rc::Rc;

use super::{Gradients, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<S>>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "parameter shape change");
        self.values[id.0] = Rc::new(value);
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
        }
    }

    /// Registers every parameter on `graph` as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<S>) -> Bound<'g, S> {
        Bound { vars: self.values.iter().map(|v| graph.leaf_shared(v.clone())).collect() }
    }

    /// Registers every parameter as a constant (inference, frozen modules).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<S>) -> Bound<'g, S> {
        Bound { vars: self.values.iter().map(|v| graph.constant((**v).clone())).collect() }
    }

    /// Binds only the listed parameters as differentiable leaves, the rest as constants.
    pub fn bind_subset<'g>(&self, graph: &'g Graph<S>, trainable: &[ParamId]) -> Bound<'g, S> {
        let vars = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if trainable.contains(&ParamId(i)) {
                    graph.leaf_shared(v.clone())
                } else {
                    graph.constant((**v).clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] registered on one graph.
pub struct Bound<'g, S: Scalar> {
    vars: Vec<Var<'g, S>>,
}

impl<'g, S: Scalar> Bound<'g, S> {
    /// Uses `vars[i]` for the parameter with index `i` (gradient checks
    /// bind parameters through their own leaves).
    pub fn from_vars(vars: Vec<Var<'g, S>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'g, S> {
        self.vars[id.0]
    }

    /// Pulls the per-parameter adjoints out of `grads`.
    pub fn collect(&self, grads: &Gradients<S>) -> ParamGrads<S> {
        ParamGrads(self.vars.iter().map(|&v| grads.get(v)).collect())
    }
}

/// Adjoint per parameter; `None` where no gradient reached it.
pub struct ParamGrads<S>(pub Vec<Option<Tensor<S>>>);

impl<S: Scalar> ParamGrads<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.0[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|t| t.is_finite())
    }
}
