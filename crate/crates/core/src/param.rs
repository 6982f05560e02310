//! Named parameter storage and tape binding.
//!
//! Parameters live in a sorted map so binding order, checkpoint layout, and
//! optimizer traversal are all deterministic functions of the names alone.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract("param_store", format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract("param_store", format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract("param_store", format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Push every parameter onto the tape as a leaf, in name order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.params {
            ids.insert(name.clone(), tape.leaf(value.clone())?);
        }
        Ok(Bound { ids })
    }
}

/// Name-to-node mapping for one tape binding of a [`ParamStore`].
pub struct Bound {
    ids: BTreeMap<String, VarId>,
}

impl Bound {
    /// Pair pre-taped leaves with their names, for callers that must own the
    /// leaf creation order (finite-difference checks over a whole store).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, VarId)>) -> Self {
        Bound { ids: pairs.into_iter().collect() }
    }

    pub fn id(&self, name: &str) -> Result<VarId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("bound_params", format!("no bound parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Kaiming-normal weights for a convolution: `std = sqrt(2 / fan_in)`.
pub fn kaiming_conv(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = (spec.in_channels / spec.groups) * spec.kh * spec.kw;
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(&spec.weight_shape(), rng).map(|v| v * std)
}

/// Register a convolution's weight (and bias when the spec has one) under
/// `prefix.w` / `prefix.b`.
pub fn register_conv(store: &mut ParamStore, prefix: &str, spec: &ConvSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert(&format!("{prefix}.w"), kaiming_conv(spec, rng))?;
    if spec.has_bias {
        store.insert(&format!("{prefix}.b"), Tensor::zeros(&[spec.out_channels]))?;
    }
    Ok(())
}

/// Tape a registered convolution.
pub fn bound_conv(tape: &mut Tape, bound: &Bound, prefix: &str, spec: &ConvSpec, x: VarId) -> Result<VarId> {
    let w = bound.id(&format!("{prefix}.w"))?;
    let b = if spec.has_bias {
        Some(bound.id(&format!("{prefix}.b"))?)
    } else {
        None
    };
    tape.conv2d(x, spec, w, b)
}

/// Register channel-norm affine parameters under `prefix.g` / `prefix.bias`.
pub fn register_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(&format!("{prefix}.g"), Tensor::ones(&[channels]))?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[channels]))?;
    Ok(())
}

pub fn bound_norm(tape: &mut Tape, bound: &Bound, prefix: &str, x: VarId) -> Result<VarId> {
    let g = bound.id(&format!("{prefix}.g"))?;
    let b = bound.id(&format!("{prefix}.bias"))?;
    tape.channel_norm(x, g, b)
}
