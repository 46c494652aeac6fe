//! The full restoration network: a 3×3 convolution into the embedding
//! space, `N_S` cascaded low-rank stages, and a 3×3 convolution back to the
//! band count. Also hosts the analytic parameter and operation counters.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cube::HsiCube;
use crate::error::{config_err, Error, Result};
use crate::lss_block::{Ablation, Arrangement, BlockConfig, BlockOptions};
use crate::params::{conv, conv_macs, conv_param_count, init_conv, Bound, ParamStore};
use crate::slsst::{self, SlsstConfig};
use crate::tensor::Tensor;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Restoration task the model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    #[default]
    Denoise,
    Inpaint,
    /// The model sees the bicubically pre-upsampled cube.
    Superres {
        scale: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub format_version: u32,
    /// Number of cascaded stages `N_S`.
    pub n_stages: usize,
    /// Embedding width `E`.
    pub embed_dim: usize,
    /// Band count `C` of the cubes.
    pub channels: usize,
    pub slsst: SlsstConfig,
    pub block: BlockOptions,
    pub ablation: Ablation,
    pub task: Task,
    /// Concatenate the observation mask to the input (inpainting only).
    pub mask_channel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            n_stages: 4,
            embed_dim: 172,
            channels: 172,
            slsst: SlsstConfig::default(),
            block: BlockOptions::default(),
            ablation: Ablation::default(),
            task: Task::Denoise,
            mask_channel: false,
        }
    }
}

impl ModelConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig::new(self.block, self.slsst.window_size, self.ablation)
    }

    pub fn in_channels(&self) -> usize {
        if self.mask_channel {
            2 * self.channels
        } else {
            self.channels
        }
    }

    /// Largest spatial side a single forward pass accepts.
    pub fn working_size(&self) -> usize {
        self.slsst.working_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(config_err!(
                "unsupported model config format_version {}",
                self.format_version
            ));
        }
        if self.n_stages == 0 {
            return Err(config_err!("n_stages must be at least 1"));
        }
        if self.embed_dim == 0 || self.channels == 0 {
            return Err(config_err!(
                "embed_dim ({}) and channels ({}) must be positive",
                self.embed_dim,
                self.channels
            ));
        }
        if let Task::Superres { scale } = self.task {
            if scale != 4 && scale != 8 {
                return Err(config_err!("super-resolution scale must be 4 or 8, got {scale}"));
            }
        }
        self.slsst.validate()?;
        self.block_config().validate(self.embed_dim)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }
}

/// All learnable arrays plus the bookkeeping needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub step: u64,
    pub seed: u64,
}

/// Deterministically initializes every parameter for `config`.
///
/// Convolution and projection weights are fan-in scaled uniform; biases,
/// bias tables and normalization offsets are zero; normalization gains and
/// the reweighting scalars are one.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let block = config.block_config();
    let mut params = ParamStore::new();
    let e = config.embed_dim;
    init_conv(&mut params, "in_conv", config.in_channels(), e, 3, 1, seed);
    for s in 0..config.n_stages {
        slsst::init_slsst(&mut params, &format!("stages.{s}"), e, &config.slsst, &block, seed)?;
    }
    init_conv(&mut params, "out_conv", e, config.channels, 3, 1, seed);
    Ok(ModelState { params, step: 0, seed })
}

/// Runs the network on a `[C_in, H, W]` node with `H, W` no larger than the
/// working size.
pub fn forward_graph(g: &mut Graph, p: &Bound, config: &ModelConfig, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != config.in_channels() {
        return Err(config_err!(
            "input has shape {:?} but the model expects {} input channels",
            s,
            config.in_channels()
        ));
    }
    let size = config.working_size();
    if s[1] > size || s[2] > size {
        return Err(config_err!(
            "input {}x{} exceeds the working size {size}x{size}; use restore_cube for tiling",
            s[1],
            s[2]
        ));
    }
    let block = config.block_config();
    let mut h = conv(g, p, "in_conv", x, 1, 1, 1)?;
    for st in 0..config.n_stages {
        h = slsst::slsst_forward(g, p, &format!("stages.{st}"), h, &config.slsst, &block)?;
    }
    conv(g, p, "out_conv", h, 1, 1, 1)
}

/// Stacks the degraded cube and (optionally) its mask into the model input.
pub fn model_input(config: &ModelConfig, d: &HsiCube, mask: Option<&HsiCube>) -> Result<Tensor> {
    if d.channels() != config.channels {
        return Err(config_err!(
            "cube has {} bands but the model was built for {}",
            d.channels(),
            config.channels
        ));
    }
    match (config.mask_channel, mask) {
        (false, _) => Ok(d.to_tensor()),
        (true, Some(m)) => {
            d.same_shape(m)?;
            let mut data = d.to_tensor().into_data();
            data.extend(m.data().iter().map(|&v| v as f64));
            Tensor::new(&[2 * d.channels(), d.height(), d.width()], data)
        }
        (true, None) => Err(config_err!("model expects a mask channel but none was given")),
    }
}

/// Restores one cube no larger than the working size.
pub fn model_forward(d: &HsiCube, state: &ModelState, config: &ModelConfig) -> Result<HsiCube> {
    model_forward_masked(d, None, state, config)
}

pub fn model_forward_masked(
    d: &HsiCube,
    mask: Option<&HsiCube>,
    state: &ModelState,
    config: &ModelConfig,
) -> Result<HsiCube> {
    let input = model_input(config, d, mask)?;
    let mut g = Graph::new();
    let p = state.params.bind(&mut g);
    let x = g.input(input);
    let y = forward_graph(&mut g, &p, config, x)?;
    let out = g.value(y);
    if !out.is_finite() {
        return Err(Error::Numeric("model output is not finite".into()));
    }
    HsiCube::from_tensor(out)
}

fn tile_starts(n: usize, size: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..n - size).step_by(size).collect();
    v.push(n - size);
    v
}

/// Restores a cube of any spatial size by running the model on
/// working-size tiles and averaging where the last tiles overlap.
pub fn restore_cube(d: &HsiCube, mask: Option<&HsiCube>, state: &ModelState, config: &ModelConfig) -> Result<HsiCube> {
    let size = config.working_size();
    if d.height() <= size && d.width() <= size {
        return model_forward_masked(d, mask, state, config);
    }
    let (c, h, w) = d.dims();
    let (th, tw) = (h.min(size), w.min(size));
    let mut acc = vec![0.0f64; c * h * w];
    let mut hits = vec![0u32; h * w];
    for &y0 in &tile_starts(h, size) {
        for &x0 in &tile_starts(w, size) {
            let tile = d.crop(y0, x0, th, tw)?;
            let tmask = mask.map(|m| m.crop(y0, x0, th, tw)).transpose()?;
            let out = model_forward_masked(&tile, tmask.as_ref(), state, config)?;
            for y in 0..th {
                for x in 0..tw {
                    hits[(y0 + y) * w + x0 + x] += 1;
                    for ch in 0..c {
                        acc[(ch * h + y0 + y) * w + x0 + x] += out.get(ch, y, x) as f64;
                    }
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, v)| (v / hits[i % (h * w)] as f64) as f32)
        .collect();
    HsiCube::new(c, h, w, data)
}

/// Closed-form parameter count; equals the scalar count of [`build_model`].
pub fn count_parameters(config: &ModelConfig) -> usize {
    let e = config.embed_dim;
    let block = config.block_config();
    conv_param_count(config.in_channels(), e, 3, 1)
        + config.n_stages * slsst::slsst_param_count(e, &config.slsst, &block)
        + conv_param_count(e, config.channels, 3, 1)
}

/// Same as [`count_parameters`] for a variant whose stages run the
/// U-shaped branch at the full embedding width instead of factorizing.
pub fn count_parameters_dense(config: &ModelConfig) -> usize {
    let e = config.embed_dim;
    let block = config.block_config();
    conv_param_count(config.in_channels(), e, 3, 1)
        + config.n_stages * slsst::dense_stage_param_count(e, &config.slsst, &block)
        + conv_param_count(e, config.channels, 3, 1)
}

fn tiled_macs(config: &ModelConfig, h: usize, w: usize, stage: u64) -> u64 {
    let size = config.working_size();
    let tiles = (tile_starts(h, size).len() * tile_starts(w, size).len()) as u64;
    let (th, tw) = (h.min(size), w.min(size));
    let e = config.embed_dim;
    let per_tile = conv_macs(config.in_channels(), e, 3, 1, th, tw)
        + config.n_stages as u64 * stage
        + conv_macs(e, config.channels, 3, 1, th, tw);
    tiles * per_tile
}

/// Multiply-accumulates of convolutions and matrix products for restoring
/// an `h × w` cube (tiled when larger than the working size).
pub fn count_macs(config: &ModelConfig, h: usize, w: usize) -> u64 {
    let stage = slsst::slsst_macs(config.embed_dim, &config.slsst, &config.block_config());
    tiled_macs(config, h, w, stage)
}

pub fn count_macs_dense(config: &ModelConfig, h: usize, w: usize) -> u64 {
    let stage = slsst::dense_stage_macs(config.embed_dim, &config.slsst, &config.block_config());
    tiled_macs(config, h, w, stage)
}

/// Applies ablation switches. Returns the rewired config and a warning
/// when nothing but convolutions would remain in the blocks.
pub fn apply_ablation(config: &ModelConfig, ablation: Ablation) -> (ModelConfig, Option<String>) {
    let mut out = config.clone();
    out.ablation = ablation;
    let warning = (!ablation.use_spe && !ablation.use_spa && !ablation.use_llff)
        .then(|| "both attention branches and the LLFF are disabled; blocks reduce to convolutions only".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    (out, warning)
}

impl std::fmt::Display for Arrangement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arrangement::Parallel => "parallel",
            Arrangement::SpeThenSpa => "spe_then_spa",
            Arrangement::SpaThenSpe => "spa_then_spe",
        })
    }
}
