//! Named trainable parameters and their deterministic initialization.
//!
//! Every parameter draws from its own RNG stream keyed by `(run_seed, name)`,
//! so initialization does not depend on the order parameters are created in.
//! That keeps two networks comparable when they share a sub-net but differ
//! elsewhere.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::BuildError;
use crate::tensor::{el, Elem, Tensor};

/// Which sub-net a parameter belongs to. Drives conditional gradient flow:
/// an optimizer step touches only the branches active for the batch origin.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Shared trunk, updated by both batch origins.
    Dsc,
    /// Depth-classification branch, updated by depth batches only.
    Dc,
    /// Semantic-segmentation branch, updated by semantic batches only.
    Sc,
    /// Regression refinement, present in phase 2 only.
    Reg,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Dsc => "dsc",
            Branch::Dc => "dc",
            Branch::Sc => "sc",
            Branch::Reg => "reg",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Elem> {
    pub name: String,
    pub branch: Branch,
    pub value: Tensor<T>,
}

/// Ordered collection of parameters with name lookup. Iteration order is
/// insertion order, which build makes deterministic.
pub struct ParamStore<T: Elem> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<(), BuildError> {
        if self.index.contains_key(&param.name) {
            return Err(BuildError::Invalid(vec![format!(
                "duplicate parameter name {}",
                param.name
            )]));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Independent RNG stream for one named parameter. The stream key is the
/// SHA-256 of the little-endian seed followed by the name bytes.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Independent u64 sub-seed for a named stream under a run seed, e.g. the
/// dropout mask of one layer at one step. Same hash scheme as [`param_rng`].
pub fn derive_stream(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Normal(0, sqrt(2/fan_in)) initialization for conv and deconv weights.
pub fn he_init<T: Elem>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    assert!(fan_in > 0, "he_init fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    let mut rng = param_rng(seed, name);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| el::<T>(normal.sample(&mut rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("he_init shape")
}
