//! Named parameter storage and the small layer helpers shared by every block.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Learnable arrays keyed by a stable dotted path such as
/// `stages.0.basis.levels.1.blocks.0.spe.attn.w_q`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.map.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.map.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Number of arrays.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Sets every array whose key starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in self.map.iter_mut() {
            if k.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Registers every array as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.map.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, key: &str) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| config_err!("missing parameter `{key}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-key RNG: initialization does not depend on construction order.
pub(crate) fn key_rng(seed: u64, key: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Fan-in scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, seed: u64, key: &str) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, &mut key_rng(seed, key))
}

/// Adds `{prefix}.weight` `[out, in / groups, k, k]` and `{prefix}.bias` `[out]`.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    seed: u64,
) {
    let wk = join(prefix, "weight");
    let fan_in = cin / groups * k * k;
    store.insert(
        wk.clone(),
        fan_in_uniform(&[cout, cin / groups, k, k], fan_in, seed, &wk),
    );
    store.insert(join(prefix, "bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn conv_param_count(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k + cout
}

pub(crate) fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, ho: usize, wo: usize) -> u64 {
    (cout * (cin / groups) * k * k * ho * wo) as u64
}

/// Adds `{prefix}.gain` (ones) and `{prefix}.bias` (zeros).
pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(join(prefix, "gain"), Tensor::ones(&[c]));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[c]));
}

/// Convolution with the parameters stored under `prefix`; `pad` is a
/// symmetric reflect padding.
pub(crate) fn conv(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    groups: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.get(&join(prefix, "weight"))?;
    let b = p.get(&join(prefix, "bias"))?;
    let x = g.reflect_pad(x, pad, pad, pad, pad)?;
    g.conv2d(x, w, Some(b), stride, groups)
}

pub(crate) const NORM_EPS: f64 = 1e-6;

pub(crate) fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&join(prefix, "gain"))?;
    let bias = p.get(&join(prefix, "bias"))?;
    g.layer_norm_channels(x, gain, bias, NORM_EPS)
}
