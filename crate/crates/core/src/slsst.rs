//! Single-stage low-rank spectral-spatial transformer.
//!
//! A stage produces a basis component `E × √N_B × √N_B` from a sequential
//! branch and an abundance component `N_B × H × W` from a U-shaped branch.
//! Their reshaped product `B'A'` (`E × N_B` times `N_B × HW`) is a rank-`N_B`
//! update added to the stage input.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::lss_block::{block_macs, block_param_count, init_block, lss_block_forward, BlockConfig};
use crate::params::{conv, conv_macs, conv_param_count, init_conv, join, Bound, ParamStore};

/// Spatial reduction of one downsampling step.
pub const SCALE_STEP: usize = 4;

/// How decoder features are merged with the encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipMerge {
    /// Channel concatenation followed by a 1×1 convolution.
    #[default]
    Concat,
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlsstConfig {
    /// Rank budget `N_B`; must be a perfect square.
    pub n_basis: usize,
    /// LSS blocks per scale of the basis branch; one downsample between
    /// consecutive entries.
    pub basis_depths: Vec<usize>,
    /// LSS blocks per encoder level of the abundance branch (mirrored in the decoder).
    pub abundance_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub window_size: usize,
    pub skip_merge: SkipMerge,
}

impl Default for SlsstConfig {
    fn default() -> Self {
        Self {
            n_basis: 16,
            basis_depths: vec![1, 1, 1],
            abundance_depths: vec![1, 1],
            bottleneck_depth: 1,
            window_size: 8,
            skip_merge: SkipMerge::Concat,
        }
    }
}

impl SlsstConfig {
    pub fn basis_side(&self) -> usize {
        let s = (self.n_basis as f64).sqrt().round() as usize;
        if s * s == self.n_basis {
            s
        } else {
            0
        }
    }

    /// Side of the square map a stage operates on: `√N_B · 4^(levels − 1)`.
    /// Smaller inputs are reflect-padded up to it.
    pub fn working_size(&self) -> usize {
        let levels = self.basis_depths.len().max(1) as u32;
        self.basis_side() * SCALE_STEP.pow(levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_basis == 0 || self.basis_side() == 0 {
            return Err(config_err!(
                "n_basis = {} is not a positive perfect square",
                self.n_basis
            ));
        }
        if self.basis_depths.is_empty() {
            return Err(config_err!("basis_depths must list at least one scale"));
        }
        if self.window_size == 0 {
            return Err(config_err!("window_size must be at least 1"));
        }
        let s = self.working_size();
        let reduction = SCALE_STEP.pow(self.abundance_depths.len() as u32);
        if !s.is_multiple_of(reduction) {
            return Err(config_err!(
                "working size {s} (from n_basis {} and {} basis scales) is not divisible by {reduction}, \
                 required by {} abundance levels",
                self.n_basis,
                self.basis_depths.len(),
                self.abundance_depths.len()
            ));
        }
        Ok(())
    }

    /// Abundance width at encoder level `l`.
    pub fn level_width(&self, l: usize) -> usize {
        self.n_basis << l
    }
}

/// Pixel-shuffle gather index: `[r²·C, H, W] -> [C, rH, rW]` with
/// `out[c, y·r + i, x·r + j] = in[c·r² + i·r + j, y, x]`.
pub fn pixel_shuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let src_c = ch * r * r + (oy % r) * r + ox % r;
                idx.push((src_c * h + oy / r) * w + ox / r);
            }
        }
    }
    idx
}

pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[0].is_multiple_of(r * r) {
        return Err(shape_err!("pixel shuffle by {r} of {:?}", s));
    }
    let c = s[0] / (r * r);
    let idx = pixel_shuffle_index(c, s[1], s[2], r);
    g.gather(x, Arc::new(idx), &[c, s[1] * r, s[2] * r])
}

pub fn init_downsample(store: &mut ParamStore, prefix: &str, c: usize, c_out: usize, seed: u64) {
    init_conv(store, &join(prefix, "dw"), c, c, SCALE_STEP, c, seed);
    init_conv(store, &join(prefix, "pw"), c, c_out, 1, 1, seed);
}

/// Depthwise 4×4 stride-4 convolution followed by a pointwise projection.
pub fn downsample(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if !s[1].is_multiple_of(SCALE_STEP) || !s[2].is_multiple_of(SCALE_STEP) {
        return Err(shape_err!("downsample needs sides divisible by 4, got {:?}", s));
    }
    let h = conv(g, p, &join(prefix, "dw"), x, SCALE_STEP, s[0], 0)?;
    conv(g, p, &join(prefix, "pw"), h, 1, 1, 0)
}

fn downsample_params(c: usize, c_out: usize) -> usize {
    conv_param_count(c, c, SCALE_STEP, c) + conv_param_count(c, c_out, 1, 1)
}

fn downsample_macs(c: usize, c_out: usize, h: usize, w: usize) -> u64 {
    let (ho, wo) = (h / SCALE_STEP, w / SCALE_STEP);
    conv_macs(c, c, SCALE_STEP, c, ho, wo) + conv_macs(c, c_out, 1, 1, ho, wo)
}

pub fn init_upsample(store: &mut ParamStore, prefix: &str, c: usize, seed: u64) -> Result<()> {
    if !c.is_multiple_of(2) {
        return Err(config_err!("upsample needs an even channel count, got {c}"));
    }
    let r2 = SCALE_STEP * SCALE_STEP;
    init_conv(store, &join(prefix, "conv"), c, r2 * (c / 2), 3, 1, seed);
    Ok(())
}

/// 3×3 convolution to `16·C/2` channels, then pixel shuffle by 4:
/// `[C, H, W] -> [C/2, 4H, 4W]`.
pub fn upsample(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let c = g.shape(x)[0];
    if !c.is_multiple_of(2) {
        return Err(config_err!("upsample needs an even channel count, got {c}"));
    }
    let h = conv(g, p, &join(prefix, "conv"), x, 1, 1, 1)?;
    pixel_shuffle(g, h, SCALE_STEP)
}

fn upsample_params(c: usize) -> usize {
    conv_param_count(c, SCALE_STEP * SCALE_STEP * (c / 2), 3, 1)
}

fn upsample_macs(c: usize, h: usize, w: usize) -> u64 {
    conv_macs(c, SCALE_STEP * SCALE_STEP * (c / 2), 3, 1, h, w)
}

fn blocks(g: &mut Graph, p: &Bound, prefix: &str, mut x: Var, depth: usize, cfg: &BlockConfig) -> Result<Var> {
    for b in 0..depth {
        x = lss_block_forward(g, p, &join(prefix, &format!("blocks.{b}")), x, cfg)?;
    }
    Ok(x)
}

fn init_blocks(store: &mut ParamStore, prefix: &str, c: usize, depth: usize, cfg: &BlockConfig, seed: u64) {
    for b in 0..depth {
        init_block(store, &join(prefix, &format!("blocks.{b}")), c, cfg, seed);
    }
}

/// Adds one stage's parameters for embedding width `e`.
pub fn init_slsst(
    store: &mut ParamStore,
    prefix: &str,
    e: usize,
    cfg: &SlsstConfig,
    block: &BlockConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    block.validate(e)?;
    let basis = join(prefix, "basis");
    init_conv(store, &join(&basis, "proj"), e, e, 1, 1, seed);
    let last = cfg.basis_depths.len() - 1;
    for (l, &d) in cfg.basis_depths.iter().enumerate() {
        let lp = join(&basis, &format!("levels.{l}"));
        init_blocks(store, &lp, e, d, block, seed);
        if l < last {
            init_downsample(store, &join(&lp, "down"), e, e, seed);
        }
    }
    init_conv(store, &join(&basis, "out"), e, e, 1, 1, seed);
    init_u(store, &join(prefix, "abund"), e, cfg.n_basis, cfg, block, seed)
}

/// U-shaped branch from `e` input channels at base width `base`.
fn init_u(
    store: &mut ParamStore,
    prefix: &str,
    e: usize,
    base: usize,
    cfg: &SlsstConfig,
    block: &BlockConfig,
    seed: u64,
) -> Result<()> {
    init_conv(store, &join(prefix, "proj"), e, base, 1, 1, seed);
    for (l, &d) in cfg.abundance_depths.iter().enumerate() {
        let w = base << l;
        block.validate(w)?;
        let lp = join(prefix, &format!("enc.{l}"));
        init_blocks(store, &lp, w, d, block, seed);
        init_downsample(store, &join(&lp, "down"), w, 2 * w, seed);
    }
    let wb = base << cfg.abundance_depths.len();
    block.validate(wb)?;
    init_blocks(
        store,
        &join(prefix, "bottleneck"),
        wb,
        cfg.bottleneck_depth,
        block,
        seed,
    );
    for (l, &d) in cfg.abundance_depths.iter().enumerate().rev() {
        let w = base << l;
        let lp = join(prefix, &format!("dec.{l}"));
        init_upsample(store, &join(&lp, "up"), 2 * w, seed)?;
        if cfg.skip_merge == SkipMerge::Concat {
            init_conv(store, &join(&lp, "merge"), 2 * w, w, 1, 1, seed);
        }
        init_blocks(store, &lp, w, d, block, seed);
    }
    init_conv(store, &join(prefix, "out"), base, base, 3, 1, seed);
    Ok(())
}

/// Sequential basis branch: `[E, S, S] -> [E, √N_B, √N_B]`.
pub fn basis_module(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    f: Var,
    cfg: &SlsstConfig,
    block: &BlockConfig,
) -> Result<Var> {
    let mut x = conv(g, p, &join(prefix, "proj"), f, 1, 1, 0)?;
    let last = cfg.basis_depths.len() - 1;
    for (l, &d) in cfg.basis_depths.iter().enumerate() {
        let lp = join(prefix, &format!("levels.{l}"));
        x = blocks(g, p, &lp, x, d, block)?;
        if l < last {
            x = downsample(g, p, &join(&lp, "down"), x)?;
        }
    }
    conv(g, p, &join(prefix, "out"), x, 1, 1, 0)
}

/// U-shaped abundance branch: `[E, S, S] -> [N_B, S, S]`.
pub fn abundance_module(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    f: Var,
    cfg: &SlsstConfig,
    block: &BlockConfig,
) -> Result<Var> {
    let mut x = conv(g, p, &join(prefix, "proj"), f, 1, 1, 0)?;
    let mut skips = Vec::with_capacity(cfg.abundance_depths.len());
    for (l, &d) in cfg.abundance_depths.iter().enumerate() {
        let lp = join(prefix, &format!("enc.{l}"));
        x = blocks(g, p, &lp, x, d, block)?;
        skips.push(x);
        x = downsample(g, p, &join(&lp, "down"), x)?;
    }
    x = blocks(g, p, &join(prefix, "bottleneck"), x, cfg.bottleneck_depth, block)?;
    for (l, &d) in cfg.abundance_depths.iter().enumerate().rev() {
        let lp = join(prefix, &format!("dec.{l}"));
        x = upsample(g, p, &join(&lp, "up"), x)?;
        let skip = skips[l];
        x = match cfg.skip_merge {
            SkipMerge::Concat => {
                let cat = g.concat0(&[x, skip])?;
                conv(g, p, &join(&lp, "merge"), cat, 1, 1, 0)?
            }
            SkipMerge::Add => g.add(x, skip)?,
        };
        x = blocks(g, p, &lp, x, d, block)?;
    }
    conv(g, p, &join(prefix, "out"), x, 1, 1, 1)
}

/// The rank-`N_B` update `reshape(B'A')` for a `[E, H, W]` input with
/// `H, W ≤ S`; the input is reflect-padded to `S × S` and the update cropped back.
pub fn slsst_update(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    f: Var,
    cfg: &SlsstConfig,
    block: &BlockConfig,
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("stage input must be [E, H, W], got {:?}", s));
    }
    let (e, h, w) = (s[0], s[1], s[2]);
    let size = cfg.working_size();
    if h > size || w > size {
        return Err(config_err!(
            "input {h}x{w} exceeds the stage working size {size}x{size}"
        ));
    }
    let padded = g.reflect_pad(f, 0, size - h, 0, size - w)?;
    let basis = basis_module(g, p, &join(prefix, "basis"), padded, cfg, block)?;
    let abund = abundance_module(g, p, &join(prefix, "abund"), padded, cfg, block)?;
    let nb = cfg.n_basis;
    if g.shape(basis) != [e, cfg.basis_side(), cfg.basis_side()] || g.shape(abund) != [nb, size, size] {
        return Err(Error::Shape(format!(
            "internal: basis {:?} / abundance {:?} do not factor E={e}, N_B={nb}",
            g.shape(basis),
            g.shape(abund)
        )));
    }
    let b = g.reshape(basis, &[e, nb])?;
    let a = g.reshape(abund, &[nb, size * size])?;
    let prod = g.matmul(b, a)?;
    let prod = g.reshape(prod, &[e, size, size])?;
    g.crop(prod, h, w)
}

/// `f + reshape(B'A')`.
pub fn slsst_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    f: Var,
    cfg: &SlsstConfig,
    block: &BlockConfig,
) -> Result<Var> {
    let update = slsst_update(g, p, prefix, f, cfg, block)?;
    g.add(f, update)
}

fn blocks_params(c: usize, depth: usize, block: &BlockConfig) -> usize {
    depth * block_param_count(c, block)
}

/// Closed-form parameter count of one stage.
pub fn slsst_param_count(e: usize, cfg: &SlsstConfig, block: &BlockConfig) -> usize {
    let last = cfg.basis_depths.len() - 1;
    let mut n = 2 * conv_param_count(e, e, 1, 1);
    for (l, &d) in cfg.basis_depths.iter().enumerate() {
        n += blocks_params(e, d, block);
        if l < last {
            n += downsample_params(e, e);
        }
    }
    n + u_param_count(e, cfg.n_basis, cfg, block)
}

/// Parameters of a U-shaped branch at base width `base`.
pub fn u_param_count(e: usize, base: usize, cfg: &SlsstConfig, block: &BlockConfig) -> usize {
    let mut n = conv_param_count(e, base, 1, 1) + conv_param_count(base, base, 3, 1);
    for (l, &d) in cfg.abundance_depths.iter().enumerate() {
        let w = base << l;
        n += 2 * blocks_params(w, d, block) + downsample_params(w, 2 * w) + upsample_params(2 * w);
        if cfg.skip_merge == SkipMerge::Concat {
            n += conv_param_count(2 * w, w, 1, 1);
        }
    }
    n + blocks_params(base << cfg.abundance_depths.len(), cfg.bottleneck_depth, block)
}

/// Closed-form multiply-accumulates of one stage (independent of the
/// input size, which is always padded to the working size).
pub fn slsst_macs(e: usize, cfg: &SlsstConfig, block: &BlockConfig) -> u64 {
    let s = cfg.working_size();
    let last = cfg.basis_depths.len() - 1;
    let mut n = conv_macs(e, e, 1, 1, s, s);
    let mut side = s;
    for (l, &d) in cfg.basis_depths.iter().enumerate() {
        n += d as u64 * block_macs(e, side, side, block);
        if l < last {
            n += downsample_macs(e, e, side, side);
            side /= SCALE_STEP;
        }
    }
    n += conv_macs(e, e, 1, 1, side, side);
    n += u_macs(e, cfg.n_basis, cfg, block);
    n + (e * cfg.n_basis * s * s) as u64
}

/// Multiply-accumulates of a U-shaped branch at base width `base`.
pub fn u_macs(e: usize, base: usize, cfg: &SlsstConfig, block: &BlockConfig) -> u64 {
    let s = cfg.working_size();
    let mut n = conv_macs(e, base, 1, 1, s, s) + conv_macs(base, base, 3, 1, s, s);
    let mut side = s;
    for (l, &d) in cfg.abundance_depths.iter().enumerate() {
        let w = base << l;
        n += 2 * d as u64 * block_macs(w, side, side, block);
        n += downsample_macs(w, 2 * w, side, side);
        n += upsample_macs(2 * w, side / SCALE_STEP, side / SCALE_STEP);
        if cfg.skip_merge == SkipMerge::Concat {
            n += conv_macs(2 * w, w, 1, 1, side, side);
        }
        side /= SCALE_STEP;
    }
    n + cfg.bottleneck_depth as u64 * block_macs(base << cfg.abundance_depths.len(), side, side, block)
}

/// Parameter count of a dense stage that runs the U-shaped branch at the
/// full embedding width `e` and adds its output directly, without the
/// basis/abundance factorization.
pub fn dense_stage_param_count(e: usize, cfg: &SlsstConfig, block: &BlockConfig) -> usize {
    u_param_count(e, e, cfg, block)
}

pub fn dense_stage_macs(e: usize, cfg: &SlsstConfig, block: &BlockConfig) -> u64 {
    u_macs(e, e, cfg, block)
}
