//! Named parameter storage with gradient accumulators.
//!
//! Parameters live outside any tape. A forward pass calls
//! [`ParamStore::bind`] to record each one as a leaf, and after
//! `backward` the leaf gradients are added into the store's buffers, so
//! repeated backward passes accumulate until [`ParamStore::zero_grads`].

use std::ops::Index;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

/// Per-parameter gradients from one backward pass, detached from its tape.
#[derive(Clone, Debug)]
pub struct GradSet<T: Real>(pub Vec<Option<Tensor<T>>>);

impl<T: Real> GradSet<T> {
    /// Elementwise sum in argument order.
    pub fn add_assign(&mut self, other: &GradSet<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x = *x + y;
                    }
                }
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Records every parameter on `tape`; frozen ones as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), !p.frozen))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &GradSet<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let (Some(g), false) = (g, p.frozen) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
    }
}

/// Tape leaves for every parameter of a store, indexable by [`ParamId`].
pub struct Binding<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Binding<'t, T> {
    /// Uses caller-made variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn collect(&self, grads: &Gradients<T>) -> GradSet<T> {
        GradSet(self.vars.iter().map(|&v| grads.get(v).cloned()).collect())
    }
}

impl<'t, T: Real> Index<ParamId> for Binding<'t, T> {
    type Output = Var<'t, T>;
    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}
