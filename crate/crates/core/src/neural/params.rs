use indexmap::IndexMap;

use super::{Gradients, Graph, Tensor, Var};

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
}

/// Graph handles for the parameters of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Panics when the name was never bound; parameter names are fixed by
    /// the model constructors, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds every parameter of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.params.extend(other.params);
    }

    /// Binds all parameters as trainable leaves.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        self.bind_where(graph, |_| true)
    }

    /// Binds parameters, treating those rejected by `trainable` as constants.
    pub fn bind_where(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    graph.param(t)
                } else {
                    graph.constant(Tensor::new(t.shape.clone(), t.values.clone()))
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from a backward pass into the `grad` fields. Bound
    /// parameters that received no gradient get zeros; constants get `None`.
    pub fn store_grads(&mut self, graph: &Graph, bound: &Bound, grads: &Gradients) {
        for (name, t) in self.params.iter_mut() {
            t.grad = match bound.try_get(name) {
                Some(v) => match grads.get(v) {
                    Some(g) => Some(g.to_vec()),
                    None if graph.is_trainable(v) => Some(vec![0.0; t.numel()]),
                    None => None,
                },
                None => None,
            };
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }
}
