//! Spectral-wise and window-based self-attention.
//!
//! Spectral attention treats channels as tokens: the `C × C` logit matrix
//! `σ·KᵀQ` is normalized column-wise so every output channel is a convex
//! combination of value channels. Window attention treats pixels inside each
//! non-overlapping `M × M` window as tokens and adds a learnable relative
//! position bias to the row-normalized logits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{fan_in_uniform, join, Bound, ParamStore};
use crate::tensor::Tensor;

/// Window attention hyperparameters for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowAttentionConfig {
    /// Window side `M` in pixels.
    pub window: usize,
    /// Query/key width per head.
    pub qk_dim: usize,
    /// Total value width (split evenly across heads).
    pub value_dim: usize,
    pub heads: usize,
}

impl WindowAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(config_err!("window size must be at least 1"));
        }
        if self.qk_dim == 0 || self.value_dim == 0 || self.heads == 0 {
            return Err(config_err!(
                "window attention widths must be positive (qk {}, value {}, heads {})",
                self.qk_dim,
                self.value_dim,
                self.heads
            ));
        }
        if !self.value_dim.is_multiple_of(self.heads) {
            return Err(config_err!(
                "value width {} not divisible by {} heads",
                self.value_dim,
                self.heads
            ));
        }
        Ok(())
    }
}

/// How a `[C, H, W]` map was cut into windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Reflect padding added below the map.
    pub pad_h: usize,
    /// Reflect padding added right of the map.
    pub pad_w: usize,
    pub n_windows: usize,
}

impl WindowLayout {
    pub fn new(channels: usize, height: usize, width: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(config_err!("window size must be at least 1"));
        }
        let pad_h = (window - height % window) % window;
        let pad_w = (window - width % window) % window;
        let n_windows = (height + pad_h) / window * ((width + pad_w) / window);
        Ok(Self {
            window,
            channels,
            height,
            width,
            pad_h,
            pad_w,
            n_windows,
        })
    }

    fn windows_x(&self) -> usize {
        (self.width + self.pad_w) / self.window
    }

    /// Gather index from the padded map into `[N, M², C]`.
    fn partition_index(&self) -> Vec<usize> {
        let (m, c) = (self.window, self.channels);
        let (ph, pw) = (self.height + self.pad_h, self.width + self.pad_w);
        let nx = self.windows_x();
        let mut idx = Vec::with_capacity(self.n_windows * m * m * c);
        for n in 0..self.n_windows {
            let (wy, wx) = (n / nx, n % nx);
            for t in 0..m * m {
                let (y, x) = (wy * m + t / m, wx * m + t % m);
                for ch in 0..c {
                    idx.push((ch * ph + y) * pw + x);
                }
            }
        }
        idx
    }

    /// Gather index from `[N, M², C']` back onto the cropped `[C', H, W]` map.
    fn merge_index(&self, channels: usize) -> Vec<usize> {
        let m = self.window;
        let nx = self.windows_x();
        let mut idx = Vec::with_capacity(channels * self.height * self.width);
        for ch in 0..channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let n = (y / m) * nx + x / m;
                    let t = (y % m) * m + x % m;
                    idx.push((n * m * m + t) * channels + ch);
                }
            }
        }
        idx
    }
}

/// Cuts a `[C, H, W]` node into `[N, M², C]` windows in raster order,
/// reflect-padding the bottom and right edges up to a multiple of `M`.
pub fn window_partition(g: &mut Graph, x: Var, window: usize) -> Result<(Var, WindowLayout)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("window partition expects [C, H, W], got {:?}", s));
    }
    let layout = WindowLayout::new(s[0], s[1], s[2], window)?;
    let padded = g.reflect_pad(x, 0, layout.pad_h, 0, layout.pad_w)?;
    let idx = layout.partition_index();
    let w = g.gather(padded, Arc::new(idx), &[layout.n_windows, window * window, s[0]])?;
    Ok((w, layout))
}

/// Inverse of [`window_partition`]; the channel count is taken from `windows`.
pub fn window_merge(g: &mut Graph, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let s = g.shape(windows).to_vec();
    let m2 = layout.window * layout.window;
    if s.len() != 3 || s[0] != layout.n_windows || s[1] != m2 {
        return Err(config_err!(
            "windows {:?} do not match layout of {} windows of {} tokens",
            s,
            layout.n_windows,
            m2
        ));
    }
    let idx = layout.merge_index(s[2]);
    g.gather(windows, Arc::new(idx), &[s[2], layout.height, layout.width])
}

/// Relative position lookup for an `m × m` window drawn from a table sized
/// for windows of side `table_window`.
///
/// Entry `(a, b)` is `(Δy + T − 1)·(2T − 1) + (Δx + T − 1)` where
/// `Δ = pos(a) − pos(b)` and `T = table_window`.
pub fn relative_position_index(table_window: usize, m: usize) -> Vec<usize> {
    debug_assert!(m <= table_window);
    let side = 2 * table_window - 1;
    let off = table_window as isize - 1;
    let m2 = m * m;
    let mut idx = Vec::with_capacity(m2 * m2);
    for a in 0..m2 {
        let (ya, xa) = ((a / m) as isize, (a % m) as isize);
        for b in 0..m2 {
            let (yb, xb) = ((b / m) as isize, (b % m) as isize);
            let dy = (ya - yb + off) as usize;
            let dx = (xa - xb + off) as usize;
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// Expands a `(2M − 1)²` bias table into the `M² × M²` bias matrix.
pub fn relative_position_bias(table: &Tensor, window: usize) -> Result<Tensor> {
    let side = (2 * window).saturating_sub(1);
    if window == 0 || table.len() != side * side {
        return Err(config_err!(
            "bias table has {} entries, window {} needs {}",
            table.len(),
            window,
            side * side
        ));
    }
    let idx = relative_position_index(window, window);
    let m2 = window * window;
    Tensor::new(&[m2, m2], idx.iter().map(|&i| table.data()[i]).collect())
}

/// Adds `w_q`, `w_k`, `w_v` (`C × C`) and `sigma` (= 1) under `prefix`.
pub fn init_spectral(store: &mut ParamStore, prefix: &str, c: usize, seed: u64) {
    for name in ["w_q", "w_k", "w_v"] {
        let k = join(prefix, name);
        store.insert(k.clone(), fan_in_uniform(&[c, c], c, seed, &k));
    }
    store.insert(join(prefix, "sigma"), Tensor::scalar(1.0));
}

pub fn spectral_param_count(c: usize) -> usize {
    3 * c * c + 1
}

/// Spectral-wise self-attention `V · Softmax(σ·KᵀQ)` on a `[C, H, W]` node.
///
/// With `heads > 1` the channels are split into equal groups and attention
/// runs inside each group.
pub fn spectral_self_attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("spectral attention expects [C, H, W], got {:?}", s));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let w_q = p.get(&join(prefix, "w_q"))?;
    let w_k = p.get(&join(prefix, "w_k"))?;
    let w_v = p.get(&join(prefix, "w_v"))?;
    let sigma = p.get(&join(prefix, "sigma"))?;
    for w in [w_q, w_k, w_v] {
        if g.shape(w) != [c, c] {
            return Err(config_err!(
                "spectral projection {:?} does not match {c} channels",
                g.shape(w)
            ));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("{c} channels cannot be split into {heads} heads"));
    }
    // Work with transposed token matrices: Xᵀ is the [C, HW] reshape of x.
    let xt = g.reshape(x, &[c, hw])?;
    let proj = |g: &mut Graph, w: Var| -> Result<Var> {
        let wt = g.transpose(w)?;
        g.matmul(wt, xt)
    };
    let qt = proj(g, w_q)?;
    let kt = proj(g, w_k)?;
    let vt = proj(g, w_v)?;
    let ch = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qt, kt, vt)
        } else {
            (
                g.slice0(qt, h * ch, ch)?,
                g.slice0(kt, h * ch, ch)?,
                g.slice0(vt, h * ch, ch)?,
            )
        };
        // (KᵀQ)ᵀ = QᵀK; its rows are the columns being normalized.
        let k_tokens = g.transpose(kh)?;
        let logits_t = g.matmul(qh, k_tokens)?;
        let logits_t = g.scale_by(logits_t, sigma)?;
        let attn_t = g.softmax_last(logits_t)?;
        // (V·A)ᵀ = Aᵀ·Vᵀ
        outs.push(g.matmul(attn_t, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { g.concat0(&outs)? };
    let out = g.reshape(out, &[c, s[1], s[2]])?;
    check_finite(g, out, "spectral attention")
}

/// Adds window attention parameters under `prefix` for input width `c`.
pub fn init_window(store: &mut ParamStore, prefix: &str, c: usize, cfg: &WindowAttentionConfig, seed: u64) {
    let qk = cfg.heads * cfg.qk_dim;
    for (name, width) in [("w_q", qk), ("w_k", qk), ("w_v", cfg.value_dim)] {
        let k = join(prefix, name);
        store.insert(k.clone(), fan_in_uniform(&[c, width], c, seed, &k));
    }
    let side = 2 * cfg.window - 1;
    store.insert(join(prefix, "bias_table"), Tensor::zeros(&[cfg.heads, side * side]));
}

pub fn window_param_count(c: usize, cfg: &WindowAttentionConfig) -> usize {
    let side = 2 * cfg.window - 1;
    c * (2 * cfg.heads * cfg.qk_dim + cfg.value_dim) + cfg.heads * side * side
}

/// Window side actually used on an `h × w` map: maps smaller than the
/// configured window become a single window.
pub fn effective_window(window: usize, h: usize, w: usize) -> usize {
    window.min(h).min(w).max(1)
}

/// Window-based self-attention `Softmax(QKᵀ + B)·V` on a `[C, H, W]` node,
/// returning `[value_dim, H, W]`.
pub fn window_self_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &WindowAttentionConfig,
) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("window attention expects [C, H, W], got {:?}", s));
    }
    let c = s[0];
    let w_q = p.get(&join(prefix, "w_q"))?;
    let w_k = p.get(&join(prefix, "w_k"))?;
    let w_v = p.get(&join(prefix, "w_v"))?;
    let table = p.get(&join(prefix, "bias_table"))?;
    let qk = cfg.heads * cfg.qk_dim;
    if g.shape(w_q) != [c, qk] || g.shape(w_k) != [c, qk] || g.shape(w_v) != [c, cfg.value_dim] {
        return Err(config_err!(
            "window projections {:?}/{:?}/{:?} do not match {c} input channels",
            g.shape(w_q),
            g.shape(w_k),
            g.shape(w_v)
        ));
    }
    let side = 2 * cfg.window - 1;
    if g.shape(table) != [cfg.heads, side * side] {
        return Err(config_err!(
            "bias table {:?}, expected [{}, {}]",
            g.shape(table),
            cfg.heads,
            side * side
        ));
    }

    let m = effective_window(cfg.window, s[1], s[2]);
    let m2 = m * m;
    let (windows, layout) = window_partition(g, x, m)?;
    let n = layout.n_windows;
    let tokens = g.reshape(windows, &[n * m2, c])?;
    let q = g.matmul(tokens, w_q)?;
    let k = g.matmul(tokens, w_k)?;
    let v = g.matmul(tokens, w_v)?;
    let q = g.reshape(q, &[n, m2, qk])?;
    let k = g.reshape(k, &[n, m2, qk])?;
    let v = g.reshape(v, &[n, m2, cfg.value_dim])?;

    let rel = relative_position_index(cfg.window, m);
    let dvh = cfg.value_dim / cfg.heads;
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                select_last(g, q, h * cfg.qk_dim, cfg.qk_dim)?,
                select_last(g, k, h * cfg.qk_dim, cfg.qk_dim)?,
                select_last(g, v, h * dvh, dvh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.batch_matmul(qh, kt)?;
        let bias_idx: Vec<usize> = rel.iter().map(|&i| h * side * side + i).collect();
        let bias = g.gather(table, Arc::new(bias_idx), &[m2, m2])?;
        let logits = g.add_broadcast(logits, bias)?;
        let attn = g.softmax_last(logits)?;
        outs.push(g.batch_matmul(attn, vh)?);
    }
    let out = if cfg.heads == 1 {
        outs[0]
    } else {
        // [heads·N, M², dvh] -> [N, M², heads·dvh]
        let stacked = g.concat0(&outs)?;
        let mut idx = Vec::with_capacity(n * m2 * cfg.value_dim);
        for wi in 0..n {
            for t in 0..m2 {
                for h in 0..cfg.heads {
                    for d in 0..dvh {
                        idx.push(((h * n + wi) * m2 + t) * dvh + d);
                    }
                }
            }
        }
        g.gather(stacked, Arc::new(idx), &[n, m2, cfg.value_dim])?
    };
    let merged = window_merge(g, out, &layout)?;
    check_finite(g, merged, "window attention")
}

/// Columns `start..start + len` of the last axis.
fn select_last(g: &mut Graph, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let last = *s.last().unwrap();
    let rows: usize = s[..s.len() - 1].iter().product();
    let mut idx = Vec::with_capacity(rows * len);
    for r in 0..rows {
        idx.extend((start..start + len).map(|j| r * last + j));
    }
    let mut shape = s.clone();
    *shape.last_mut().unwrap() = len;
    g.gather(x, Arc::new(idx), &shape)
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(crate::error::Error::Numeric(format!(
            "{what} produced non-finite values"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Spectral,
    Window,
}

/// Multiply-accumulates in the attention core (logits plus value
/// aggregation, projections excluded).
///
/// Spectral: `2·HW·C²`. Window: `N·M⁴·(d_qk + d_v)` with `N` windows after
/// padding and `M` clamped to the map size.
pub fn attention_mac_count(
    kind: AttentionKind,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    qk_dim: usize,
    value_dim: usize,
) -> u64 {
    match kind {
        AttentionKind::Spectral => 2 * (h * w * c * c) as u64,
        AttentionKind::Window => {
            let m = effective_window(window, h, w);
            let n = h.div_ceil(m) * w.div_ceil(m);
            let m4 = m * m * m * m;
            (n * m4 * (qk_dim + value_dim)) as u64
        }
    }
}
