//! The lightweight spectral-spatial transformer block: parallel spectral and
//! spatial attention branches blended by learnable scalars, followed by the
//! gated locally-enhanced feed-forward network.

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, effective_window, init_spectral, init_window, spectral_param_count, window_param_count, WindowAttentionConfig,
};
use crate::autograd::{Graph, Var};
use crate::error::{config_err, Result};
use crate::params::{conv, conv_macs, conv_param_count, init_conv, init_norm, join, norm, Bound, ParamStore};
use crate::tensor::Tensor;

/// How the two attention branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// `α·SpeA(x) + β·SpaA(x)`
    #[default]
    Parallel,
    /// `SpaA(SpeA(x))`
    SpeThenSpa,
    /// `SpeA(SpaA(x))`
    SpaThenSpe,
}

/// Architecture switches used for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_spe: bool,
    pub use_spa: bool,
    pub arrangement: Arrangement,
    pub use_llff: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_spe: true,
            use_spa: true,
            arrangement: Arrangement::Parallel,
            use_llff: true,
        }
    }
}

/// Width-independent block hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockOptions {
    /// Attention runs at `ceil(C / subspace_factor)` channels.
    pub subspace_factor: usize,
    /// LLFF expands to `llff_expansion · C` channels before gating.
    pub llff_expansion: usize,
    pub qk_dim: usize,
    /// Window-attention value width; `None` means the subspace width.
    pub value_dim: Option<usize>,
    pub heads: usize,
    /// Layer-normalize the LLFF input.
    pub llff_norm: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            subspace_factor: 2,
            llff_expansion: 2,
            qk_dim: 1,
            value_dim: None,
            heads: 1,
            llff_norm: true,
        }
    }
}

/// Everything needed to build or run one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub options: BlockOptions,
    pub window: usize,
    pub ablation: Ablation,
}

impl BlockConfig {
    pub fn new(options: BlockOptions, window: usize, ablation: Ablation) -> Self {
        Self {
            options,
            window,
            ablation,
        }
    }

    /// Attention width for a block operating on `c` channels.
    pub fn sub_width(&self, c: usize) -> usize {
        c.div_ceil(self.options.subspace_factor.max(1)).max(1)
    }

    pub fn window_config(&self, c: usize) -> WindowAttentionConfig {
        let sub = self.sub_width(c);
        WindowAttentionConfig {
            window: self.window,
            qk_dim: self.options.qk_dim,
            value_dim: self.options.value_dim.unwrap_or(sub),
            heads: self.options.heads,
        }
    }

    fn hidden(&self, c: usize) -> usize {
        self.options.llff_expansion * c
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        let o = &self.options;
        if o.subspace_factor == 0 || o.llff_expansion == 0 || o.heads == 0 {
            return Err(config_err!(
                "subspace_factor, llff_expansion and heads must be positive"
            ));
        }
        if !self.hidden(c).is_multiple_of(2) {
            return Err(config_err!(
                "LLFF expansion {}·{} is odd; the simple gate needs an even width",
                o.llff_expansion,
                c
            ));
        }
        let sub = self.sub_width(c);
        if !sub.is_multiple_of(o.heads) {
            return Err(config_err!("attention width {sub} not divisible by {} heads", o.heads));
        }
        self.window_config(c).validate()
    }
}

/// Splits `[2k, H, W]` into halves `X`, `Y` and returns `X ⊙ Y`.
pub fn simple_gate(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.shape(x)[0];
    if !c.is_multiple_of(2) {
        return Err(config_err!("simple gate needs an even channel count, got {c}"));
    }
    let a = g.slice0(x, 0, c / 2)?;
    let b = g.slice0(x, c / 2, c / 2)?;
    g.mul(a, b)
}

pub fn init_llff(store: &mut ParamStore, prefix: &str, c: usize, cfg: &BlockConfig, seed: u64) {
    let hidden = cfg.hidden(c);
    if cfg.options.llff_norm {
        init_norm(store, &join(prefix, "norm"), c);
    }
    init_conv(store, &join(prefix, "expand"), c, hidden, 1, 1, seed);
    init_conv(store, &join(prefix, "dw"), hidden / 2, hidden / 2, 3, hidden / 2, seed);
    init_conv(store, &join(prefix, "project"), hidden / 2, c, 1, 1, seed);
}

/// `x + project(dwconv(gate(expand(norm(x)))))`.
pub fn llff_forward(g: &mut Graph, p: &Bound, prefix: &str, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let c = g.shape(x)[0];
    let hidden = cfg.hidden(c);
    let expand_w = p.get(&join(prefix, "expand.weight"))?;
    if g.shape(expand_w) != [hidden, c, 1, 1] {
        return Err(config_err!(
            "LLFF expand weight {:?} does not fit {c} channels",
            g.shape(expand_w)
        ));
    }
    let mut h = x;
    if cfg.options.llff_norm {
        h = norm(g, p, &join(prefix, "norm"), h)?;
    }
    let h = conv(g, p, &join(prefix, "expand"), h, 1, 1, 0)?;
    let h = simple_gate(g, h)?;
    let h = conv(g, p, &join(prefix, "dw"), h, 1, hidden / 2, 1)?;
    let h = conv(g, p, &join(prefix, "project"), h, 1, 1, 0)?;
    g.add(x, h)
}

fn init_sandwich(store: &mut ParamStore, prefix: &str, c: usize, core_out: usize, cfg: &BlockConfig, seed: u64) {
    let sub = cfg.sub_width(c);
    init_norm(store, &join(prefix, "norm"), c);
    init_conv(store, &join(prefix, "down"), c, sub, 1, 1, seed);
    init_conv(store, &join(prefix, "up"), core_out, c, 1, 1, seed);
}

pub fn init_spectral_block(store: &mut ParamStore, prefix: &str, c: usize, cfg: &BlockConfig, seed: u64) {
    let sub = cfg.sub_width(c);
    init_sandwich(store, prefix, c, sub, cfg, seed);
    init_spectral(store, &join(prefix, "attn"), sub, seed);
}

pub fn init_spatial_block(store: &mut ParamStore, prefix: &str, c: usize, cfg: &BlockConfig, seed: u64) {
    let wcfg = cfg.window_config(c);
    init_sandwich(store, prefix, c, wcfg.value_dim, cfg, seed);
    init_window(store, &join(prefix, "attn"), cfg.sub_width(c), &wcfg, seed);
}

/// `x + up(S-SA(down(norm(x))))`.
pub fn spectral_attention_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let h = norm(g, p, &join(prefix, "norm"), x)?;
    let h = conv(g, p, &join(prefix, "down"), h, 1, 1, 0)?;
    let h = attention::spectral_self_attention(g, p, &join(prefix, "attn"), h, cfg.options.heads)?;
    let h = conv(g, p, &join(prefix, "up"), h, 1, 1, 0)?;
    g.add(x, h)
}

/// `x + up(W-SA(down(norm(x))))`.
pub fn spatial_attention_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let c = g.shape(x)[0];
    let h = norm(g, p, &join(prefix, "norm"), x)?;
    let h = conv(g, p, &join(prefix, "down"), h, 1, 1, 0)?;
    let h = attention::window_self_attention(g, p, &join(prefix, "attn"), h, &cfg.window_config(c))?;
    let h = conv(g, p, &join(prefix, "up"), h, 1, 1, 0)?;
    g.add(x, h)
}

/// Adds all parameters of one block operating on `c` channels.
pub fn init_block(store: &mut ParamStore, prefix: &str, c: usize, cfg: &BlockConfig, seed: u64) {
    init_spectral_block(store, &join(prefix, "spe"), c, cfg, seed);
    init_spatial_block(store, &join(prefix, "spa"), c, cfg, seed);
    store.insert(join(prefix, "alpha"), Tensor::scalar(1.0));
    store.insert(join(prefix, "beta"), Tensor::scalar(1.0));
    init_llff(store, &join(prefix, "llff"), c, cfg, seed);
}

/// Runs one block, honoring the ablation switches in `cfg`.
pub fn lss_block_forward(g: &mut Graph, p: &Bound, prefix: &str, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let ab = cfg.ablation;
    let spe = |g: &mut Graph, v: Var| spectral_attention_block(g, p, &join(prefix, "spe"), v, cfg);
    let spa = |g: &mut Graph, v: Var| spatial_attention_block(g, p, &join(prefix, "spa"), v, cfg);
    let mixed = match ab.arrangement {
        Arrangement::Parallel => {
            let mut acc: Option<Var> = None;
            if ab.use_spe {
                let a = p.get(&join(prefix, "alpha"))?;
                let y = spe(g, x)?;
                acc = Some(g.scale_by(y, a)?);
            }
            if ab.use_spa {
                let b = p.get(&join(prefix, "beta"))?;
                let y = spa(g, x)?;
                let y = g.scale_by(y, b)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, y)?,
                    None => y,
                });
            }
            // with no attention branch the block passes x on unchanged
            acc.unwrap_or(x)
        }
        Arrangement::SpeThenSpa => {
            let mut y = x;
            if ab.use_spe {
                y = spe(g, y)?;
            }
            if ab.use_spa {
                y = spa(g, y)?;
            }
            y
        }
        Arrangement::SpaThenSpe => {
            let mut y = x;
            if ab.use_spa {
                y = spa(g, y)?;
            }
            if ab.use_spe {
                y = spe(g, y)?;
            }
            y
        }
    };
    if ab.use_llff {
        llff_forward(g, p, &join(prefix, "llff"), mixed, cfg)
    } else {
        Ok(mixed)
    }
}

/// Closed-form parameter count of [`init_block`].
pub fn block_param_count(c: usize, cfg: &BlockConfig) -> usize {
    let sub = cfg.sub_width(c);
    let wcfg = cfg.window_config(c);
    let hidden = cfg.hidden(c);
    let norm = 2 * c;
    let spe = norm + conv_param_count(c, sub, 1, 1) + spectral_param_count(sub) + conv_param_count(sub, c, 1, 1);
    let spa = norm
        + conv_param_count(c, sub, 1, 1)
        + window_param_count(sub, &wcfg)
        + conv_param_count(wcfg.value_dim, c, 1, 1);
    let llff = if cfg.options.llff_norm { norm } else { 0 }
        + conv_param_count(c, hidden, 1, 1)
        + conv_param_count(hidden / 2, hidden / 2, 3, hidden / 2)
        + conv_param_count(hidden / 2, c, 1, 1);
    spe + spa + 2 + llff
}

/// Closed-form multiply-accumulate count of [`lss_block_forward`] on an
/// `h × w` map, counting convolutions and matrix products.
pub fn block_macs(c: usize, h: usize, w: usize, cfg: &BlockConfig) -> u64 {
    let ab = cfg.ablation;
    let hw = (h * w) as u64;
    let sub = cfg.sub_width(c);
    let heads = cfg.options.heads;
    let wcfg = cfg.window_config(c);
    let mut total = 0u64;
    if ab.use_spe {
        let sandwich = conv_macs(c, sub, 1, 1, h, w) + conv_macs(sub, c, 1, 1, h, w);
        let proj = 3 * (sub * sub) as u64 * hw;
        let core = heads as u64
            * attention::attention_mac_count(attention::AttentionKind::Spectral, sub / heads, h, w, 0, 0, 0);
        total += sandwich + proj + core;
    }
    if ab.use_spa {
        let m = effective_window(wcfg.window, h, w);
        let n = (h.div_ceil(m) * w.div_ceil(m)) as u64;
        let tokens = n * (m * m) as u64;
        let sandwich = conv_macs(c, sub, 1, 1, h, w) + conv_macs(wcfg.value_dim, c, 1, 1, h, w);
        let proj = tokens * (sub * (2 * heads * wcfg.qk_dim + wcfg.value_dim)) as u64;
        let core = attention::attention_mac_count(
            attention::AttentionKind::Window,
            sub,
            h,
            w,
            wcfg.window,
            heads * wcfg.qk_dim,
            wcfg.value_dim,
        );
        total += sandwich + proj + core;
    }
    if ab.use_llff {
        let hidden = cfg.hidden(c);
        total += conv_macs(c, hidden, 1, 1, h, w)
            + conv_macs(hidden / 2, hidden / 2, 3, hidden / 2, h, w)
            + conv_macs(hidden / 2, c, 1, 1, h, w);
    }
    total
}
