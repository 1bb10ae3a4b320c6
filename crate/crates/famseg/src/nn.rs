//! Named parameter storage and the small layer combinators shared by the
//! encoder and decoder.
//!
//! Parameters live outside any tape as named f64 arrays; each forward pass
//! binds them onto a fresh [`Tape`] as `requires_grad` leaves. Names are
//! hierarchical dotted paths, and the store iterates in sorted name order so
//! checkpoints and optimizer traversals are deterministic.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FamError, Result};
use crate::tensor::{numel, Tape, TensorId};

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(numel(&shape), data.len(), "param {name}");
        debug_assert!(!self.entries.contains_key(name), "duplicate param {name}");
        self.entries.insert(name.to_string(), Param { shape, data });
    }

    /// Uniform init in ±limit.
    pub fn register_uniform(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, limit: f64) {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, shape, data);
    }

    /// Kaiming-style init for a conv/linear weight with the given fan-in.
    pub fn register_conv(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, fan_in: usize) {
        let limit = (1.0 / fan_in as f64).sqrt();
        self.register_uniform(rng, name, shape, limit);
    }

    pub fn register_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n = numel(&shape);
        self.insert(name, shape, vec![value; n]);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Bind every parameter onto the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            let id = tape.leaf(p.data.clone(), p.shape.clone(), true)?;
            ids.insert(name.clone(), id);
        }
        Ok(Bound { ids })
    }
}

/// Tape-bound view of a [`ParamStore`] for one forward/backward pass.
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    /// Assemble a bound view from explicit name→id pairs. Useful when a
    /// verification harness owns the leaves (e.g. finite-difference checks).
    pub fn from_ids(ids: BTreeMap<String, TensorId>) -> Self {
        Bound { ids }
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| FamError::Incompatible(format!("parameter `{name}` missing from store")))
    }

    /// Gradients in store order after a backward pass.
    pub fn grads<'t>(&self, tape: &'t Tape) -> BTreeMap<String, &'t [f64]> {
        self.ids
            .iter()
            .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Normalization group count used throughout the network.
pub fn norm_groups(channels: usize) -> usize {
    channels.min(8)
}

/// conv -> group norm -> GELU, the standard block glue.
#[allow(clippy::too_many_arguments)]
pub fn conv_gn_gelu(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    out_channels: usize,
) -> Result<TensorId> {
    let w = bound.id(&format!("{prefix}.w"))?;
    let y = tape.conv2d(x, w, stride, padding, groups)?;
    let g = bound.id(&format!("{prefix}.gn.g"))?;
    let b = bound.id(&format!("{prefix}.gn.b"))?;
    let y = tape.group_norm(y, g, b, norm_groups(out_channels), crate::nn::GN_EPS)?;
    tape.gelu(y)
}

pub const GN_EPS: f64 = 1e-5;

/// Register a conv + group-norm parameter group under `prefix`.
pub fn register_conv_gn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    weight_shape: Vec<usize>,
    out_channels: usize,
) {
    let fan_in = weight_shape[1] * weight_shape[2] * weight_shape[3];
    store.register_conv(rng, &format!("{prefix}.w"), weight_shape, fan_in);
    store.register_const(&format!("{prefix}.gn.g"), vec![out_channels], 1.0);
    store.register_const(&format!("{prefix}.gn.b"), vec![out_channels], 0.0);
}
