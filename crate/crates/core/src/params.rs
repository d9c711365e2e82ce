//! Named parameter storage.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// What a parameter is for; used by parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Part of the static architecture shared by every variant.
    Static,
    /// Maps a condition embedding to a conditional weight.
    Generator,
    /// Belongs to a non-weight-generating control method (adaptive norm,
    /// condition token projection, kernel banks).
    Control,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    roles: Vec<ParamRole>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            roles: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.roles.push(role);
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

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` expects {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.roles[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn numel_by_role(&self, role: ParamRole) -> usize {
        self.values
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == role)
            .map(|(v, _)| v.numel())
            .sum()
    }

    /// Registers parameter `id` as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(id, self.values[id.0].clone())
    }

    /// Same names and roles, every value converted to `U`.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            roles: self.roles.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// RNG for initializing the parameter `name`. Depends only on the seed and
/// the name, so a parameter starts identical in every model that has it.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", ParamRole::Static, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", ParamRole::Static, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", ParamRole::Generator, Tensor::zeros(&[2, 3])).unwrap();
        assert!(s.set(id, Tensor::zeros(&[3, 2])).is_err());
        assert!(s.set(id, Tensor::ones(&[2, 3])).is_ok());
        assert_eq!(s.numel_by_role(ParamRole::Generator), 6);
        assert_eq!(s.numel_by_role(ParamRole::Static), 0);
    }
}
