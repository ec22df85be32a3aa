use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Array, Gradients, Graph, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter collection owned by one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Array>,
}

/// Graph leaves for every parameter of a store, in store order.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut array: Array) -> ParamId {
        array.set_requires_grad(true);
        self.names.push(name.into());
        self.params.push(array);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn arrays(&self) -> &[Array] {
        &self.params
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    /// Binds every parameter as a differentiable leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.params.iter().map(|p| g.input(p)).collect(),
        }
    }

    /// Binds every parameter as a constant (no gradients flow into it).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p)).collect(),
        }
    }

    /// Adds the gradients of `bound` into each parameter's accumulator.
    ///
    /// All gradients are validated first so nothing is written on error.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::shape(
                "ParamStore::accumulate",
                &[self.params.len()],
                &[bound.vars.len()],
            ));
        }
        for (p, v) in self.params.iter().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                if g.len() != p.len() {
                    return Err(Error::shape("ParamStore::accumulate", p.shape(), &[g.len()]));
                }
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::Numeric {
                        node: v.id(),
                        op: "leaf",
                    });
                }
            }
        }
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(*v, p)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Array::zero_grad);
    }

    /// Adds independent Gaussian noise of the given std to every parameter.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut self.params {
            for v in p.data_mut() {
                *v += normal.sample(rng);
            }
        }
    }

    /// Flat copy of all parameter values in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Overwrites all parameter values from a flat vector in store order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape("ParamStore::unflatten", &[self.numel()], &[flat.len()]));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Flat copy of all gradient accumulators.
    pub fn flat_grad(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            })
            .collect()
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.len() != data.len() {
            return Err(Error::shape("ParamStore::set", p.shape(), &[data.len()]));
        }
        p.data_mut().copy_from_slice(data);
        Ok(())
    }
}
