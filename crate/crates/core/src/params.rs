//! Named learnable tensors and their binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// All learnable tensors of a model, keyed by dotted name.
///
/// Each tensor is drawn from its own stream seeded by `(seed, name)`, so a
/// component initialises identically whichever other components share the
/// store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Glorot { fan_in, fan_out } => {
                Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), &mut rng)
            }
            Init::FanIn(fan_in) => Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng),
        };
        self.params.insert(name.to_string(), t);
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Load(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Fails with both name lists when `other` does not have exactly the
    /// same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let missing: Vec<&str> = self.names().filter(|n| !other.contains(n)).collect();
        let unexpected: Vec<&str> = other.names().filter(|n| !self.contains(n)).collect();
        let mismatched: Vec<String> = self
            .iter()
            .filter_map(|(n, t)| {
                other
                    .params
                    .get(n)
                    .filter(|o| o.shape() != t.shape())
                    .map(|o| format!("{n}: {:?} vs {:?}", t.shape(), o.shape()))
            })
            .collect();
        if missing.is_empty() && unexpected.is_empty() && mismatched.is_empty() {
            return Ok(());
        }
        Err(Error::Load(format!(
            "architecture mismatch; missing: {missing:?}; unexpected: {unexpected:?}; shape mismatch: {mismatched:?}"
        )))
    }
}

/// Parameters bound as gradient-collecting leaves of one tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: HashMap::new(),
        }
    }

    /// Uses `var` for `name` instead of a fresh leaf, e.g. when a gradient
    /// check owns the leaves.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// The tape variable for `name`, created on first use.
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = tape.param_named(self.store.get(name)?.clone(), name);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter after `tape.backward`. Parameters
    /// the loss did not reach map to zeros.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}
