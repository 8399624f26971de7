//! Named, trainable parameters and their initialisation.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Standard deviation of the truncated-normal initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub(crate) store: u32,
    pub(crate) index: u32,
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamRole {
    /// Randomly initialised recommendation parameters (learning rate γ^R).
    Backbone,
    /// The modality encoder proper (learning rate γ^M).
    ModalityEncoder,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub role: ParamRole,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: u32,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> ParamId {
        let index = self.params.len() as u32;
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
            role,
        });
        ParamId {
            store: self.id,
            index,
        }
    }

    /// Adds a parameter drawn from a truncated normal with mean 0 and std 0.02.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        role: ParamRole,
        rng: &mut impl Rng,
    ) -> ParamId {
        let value = truncated_normal(shape, INIT_STD, rng);
        self.add(name, value, role)
    }

    pub fn get(&self, id: ParamId) -> Result<&Parameter<T>> {
        self.check(id)?;
        Ok(&self.params[id.index as usize])
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Parameter<T>> {
        self.check(id)?;
        Ok(&mut self.params[id.index as usize])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.get(id).expect("parameter from this store").value
    }

    fn check(&self, id: ParamId) -> Result<()> {
        if id.store != self.id {
            return Err(Error::MissingNode(format!(
                "parameter belongs to store {}, not {}",
                id.store, self.id
            )));
        }
        if id.index as usize >= self.params.len() {
            return Err(Error::Bounds {
                what: "parameter",
                index: id.index as usize,
                len: self.params.len(),
            });
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len() as u32).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.ids().zip(self.params.iter())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    /// Total number of scalar weights that the optimizer updates.
    pub fn num_tunable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients that belong to this store into each parameter's slot.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            if id.store != self.id {
                continue;
            }
            let p = &mut self.params[id.index as usize];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Gives every trainable parameter that the last pass did not reach a zero
    /// gradient, so a dense optimizer step can proceed.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.requires_grad && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Copies all values out, e.g. to remember the best-validation weights.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "snapshot has {} tensors, store has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "{}: snapshot shape {:?} vs {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Std of a unit normal truncated to [-2, 2].
const TRUNC2_STD: f64 = 0.879_623_3;

/// Normal truncated at two underlying scales, rescaled so its std is exactly `std`.
pub fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let scale = std / TRUNC2_STD;
    let normal = Normal::new(0.0, scale).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * scale {
                break T::lit(x);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn truncated_normal_is_bounded_and_scaled() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = truncated_normal(&[200, 50], 0.02, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 2.0 * 0.02 / TRUNC2_STD));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let sd = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.02).abs() < 0.0005, "sd {sd}");
    }

    #[test]
    fn ids_from_other_store_are_rejected() {
        let mut a = ParamStore::<f64>::new();
        let b = ParamStore::<f64>::new();
        let id = a.add("w", Tensor::zeros(&[2]), ParamRole::Backbone);
        assert!(b.get(id).is_err());
        assert!(a.get(id).is_ok());
    }
}
