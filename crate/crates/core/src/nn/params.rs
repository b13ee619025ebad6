use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Owns every trainable tensor of a model. Reads through a graph are logged
/// so tests can assert which parameters a forward pass touched.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    accessed: RefCell<Vec<bool>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        self.accessed.borrow_mut().push(false);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn mark_accessed(&self, id: ParamId) {
        self.accessed.borrow_mut()[id.0] = true;
    }

    pub fn clear_access_log(&self) {
        self.accessed.borrow_mut().iter_mut().for_each(|a| *a = false);
    }

    pub fn accessed_names(&self) -> Vec<String> {
        self.accessed
            .borrow()
            .iter()
            .zip(&self.params)
            .filter(|(a, _)| **a)
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    /// He-style normal for ReLU convolutions, `std = sqrt(2 / fan_in)`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.sample::<f64, _>(StandardNormal) * std)
    }
}
