//! Transformer primitives shared by the condition encoder and the denoiser:
//! reverse-mode tape, attention/FFN/AdaLN builders, initialization, and a
//! finite-difference gradient checker.

mod gradcheck;
mod init;
mod layers;
mod tape;

pub use gradcheck::{grad_check, GradCheckError};
pub use init::{init_tensor, param_rng, trunc_normal, InitKind};
pub use layers::{
    adaln_modulate, feedforward, multihead_attention, time_features, time_features_dt, transformer_block,
    BlockConfig, Ctx,
};
pub use tape::{Tape, ValId};

use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Named parameter tensors with deterministic iteration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, t);
    }

    /// Overwrites an existing entry (or creates one).
    pub fn insert_replace(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero tensors with matching names/shapes (optimizer moments).
    pub fn zeros_like(&self) -> ParamStore<S> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

/// Gradients keyed by parameter name.
pub type GradMap<S> = BTreeMap<String, Tensor<S>>;
