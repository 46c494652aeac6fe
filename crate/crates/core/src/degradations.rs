//! Seeded degradation simulators: additive Gaussian noise, stripe and
//! missing-band corruption, and area downsampling with bicubic
//! re-upsampling.
//!
//! Every simulator is a pure function of `(cube, parameters, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{config_err, Result};

/// Noise standard deviation in 8-bit units (divided by 255 on `[0, 1]` data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseLevel {
    Fixed(f64),
    /// Drawn once per cube from `U[lo, hi]`.
    Blind([f64; 2]),
}

impl NoiseLevel {
    pub const BLIND: NoiseLevel = NoiseLevel::Blind([30.0, 70.0]);
}

/// Stripes run along full columns (push-broom defects) or full rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StripeOrientation {
    #[default]
    Vertical,
    Horizontal,
}

/// Inclusive ranges for the random stripe pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StripeSpec {
    pub n_groups: [usize; 2],
    /// Stripe width in pixels.
    pub width: [usize; 2],
    /// Bands covered by one stripe group; `None` means `[1, max(1, C/4)]`.
    pub band_span: Option<[usize; 2]>,
    /// Number of fully missing contiguous band ranges.
    pub n_missing: [usize; 2],
    pub missing_len: [usize; 2],
    pub orientation: StripeOrientation,
    /// Restricts where a stripe group starts (pixels); `None` is anywhere.
    pub position: Option<[usize; 2]>,
    /// Restricts the first band of a stripe group; `None` is any band.
    pub band_start: Option<[usize; 2]>,
}

impl Default for StripeSpec {
    fn default() -> Self {
        Self {
            n_groups: [3, 10],
            width: [1, 10],
            band_span: None,
            n_missing: [1, 5],
            missing_len: [1, 10],
            orientation: StripeOrientation::Vertical,
            position: None,
            band_start: None,
        }
    }
}

impl StripeSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("n_groups", Some(self.n_groups)),
            ("width", Some(self.width)),
            ("band_span", self.band_span),
            ("n_missing", Some(self.n_missing)),
            ("missing_len", Some(self.missing_len)),
            ("position", self.position),
            ("band_start", self.band_start),
        ];
        for (name, r) in ranges {
            if let Some([lo, hi]) = r {
                if lo > hi {
                    return Err(config_err!("stripe range {name} = [{lo}, {hi}] is empty"));
                }
            }
        }
        Ok(())
    }
}

/// One stripe group: `width` lines starting at `start`, over bands
/// `band_start .. band_start + band_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stripe {
    pub start: usize,
    pub width: usize,
    pub band_start: usize,
    pub band_len: usize,
}

/// A realized corruption pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripePattern {
    pub orientation: StripeOrientation,
    pub stripes: Vec<Stripe>,
    /// Fully missing `(first band, length)` ranges.
    pub missing: Vec<(usize, usize)>,
}

/// Task-level degradation description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    Noise {
        sigma: NoiseLevel,
        #[serde(default)]
        clip: bool,
    },
    Stripes(StripeSpec),
    /// Area downsampling by `scale`, then bicubic upsampling back.
    Downsample {
        scale: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub degradation: Degradation,
    #[serde(default)]
    pub seed: u64,
}

/// Output of [`DegradationSpec::apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub cube: HsiCube,
    pub mask: Option<HsiCube>,
    /// The low-resolution cube for downsampling tasks.
    pub low_res: Option<HsiCube>,
}

/// Seed of the `index`-th cube's stream under a base seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DegradationSpec {
    /// Degrades the `index`-th cube of a collection; each index gets its own
    /// seed-derived random stream.
    pub fn apply(&self, x: &HsiCube, index: u64) -> Result<Degraded> {
        let seed = derive_seed(self.seed, index);
        match &self.degradation {
            Degradation::Noise { sigma, clip } => {
                let mut y = add_gaussian_noise(x, *sigma, seed)?;
                if *clip {
                    y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                }
                Ok(Degraded {
                    cube: y,
                    mask: None,
                    low_res: None,
                })
            }
            Degradation::Stripes(spec) => {
                let (cube, mask) = apply_stripes(x, spec, seed)?;
                Ok(Degraded {
                    cube,
                    mask: Some(mask),
                    low_res: None,
                })
            }
            Degradation::Downsample { scale } => {
                let low = downsample_cube(x, *scale)?;
                let up = bicubic_upsample(&low, *scale)?;
                Ok(Degraded {
                    cube: up,
                    mask: None,
                    low_res: Some(low),
                })
            }
        }
    }
}

/// Draws the σ actually used for one cube (8-bit units).
pub fn realize_sigma(level: NoiseLevel, rng: &mut impl Rng) -> Result<f64> {
    match level {
        NoiseLevel::Fixed(s) if s >= 0.0 && s.is_finite() => Ok(s),
        NoiseLevel::Fixed(s) => Err(config_err!("noise sigma must be non-negative, got {s}")),
        NoiseLevel::Blind([lo, hi]) if 0.0 <= lo && lo <= hi => {
            Ok(if lo == hi { lo } else { rng.random_range(lo..=hi) })
        }
        NoiseLevel::Blind([lo, hi]) => Err(config_err!("blind noise range [{lo}, {hi}] is invalid")),
    }
}

/// `y = x + n`, `n ~ N(0, (σ/255)²)` i.i.d., not clipped.
pub fn add_gaussian_noise(x: &HsiCube, sigma: NoiseLevel, seed: u64) -> Result<HsiCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = realize_sigma(sigma, &mut rng)? / 255.0;
    let mut y = x.clone();
    if s == 0.0 {
        return Ok(y);
    }
    let normal = Normal::new(0.0, s).map_err(|e| config_err!("noise: {e}"))?;
    for v in y.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
    Ok(y)
}

fn draw(rng: &mut impl Rng, [lo, hi]: [usize; 2]) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a stripe pattern for a `C × H × W` cube. Ranges that run past the
/// cube are clamped.
pub fn realize_stripes(spec: &StripeSpec, dims: (usize, usize, usize), seed: u64) -> Result<StripePattern> {
    spec.validate()?;
    let (c, h, w) = dims;
    let extent = match spec.orientation {
        StripeOrientation::Vertical => w,
        StripeOrientation::Horizontal => h,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = spec.band_span.unwrap_or([1, (c / 4).max(1)]);
    let mut stripes = Vec::new();
    if c > 0 && extent > 0 {
        for _ in 0..draw(&mut rng, spec.n_groups) {
            let start = match spec.position {
                Some([lo, hi]) => draw(&mut rng, [lo.min(extent - 1), hi.min(extent - 1)]),
                None => rng.random_range(0..extent),
            };
            let width = draw(&mut rng, spec.width).min(extent - start);
            let band_start = match spec.band_start {
                Some([lo, hi]) => draw(&mut rng, [lo.min(c - 1), hi.min(c - 1)]),
                None => rng.random_range(0..c),
            };
            let band_len = draw(&mut rng, span).min(c - band_start);
            stripes.push(Stripe {
                start,
                width,
                band_start,
                band_len,
            });
        }
    }
    let mut missing = Vec::new();
    if c > 0 {
        for _ in 0..draw(&mut rng, spec.n_missing) {
            let start = rng.random_range(0..c);
            let len = draw(&mut rng, spec.missing_len).min(c - start);
            missing.push((start, len));
        }
    }
    Ok(StripePattern {
        orientation: spec.orientation,
        stripes,
        missing,
    })
}

/// Binary observation mask (1 = observed) for a realized pattern.
pub fn pattern_mask(pattern: &StripePattern, dims: (usize, usize, usize)) -> HsiCube {
    let (c, h, w) = dims;
    let mut mask = HsiCube::filled(c, h, w, 1.0);
    for s in &pattern.stripes {
        for b in s.band_start..s.band_start + s.band_len {
            for line in s.start..s.start + s.width {
                match pattern.orientation {
                    StripeOrientation::Vertical => (0..h).for_each(|y| mask.set(b, y, line, 0.0)),
                    StripeOrientation::Horizontal => (0..w).for_each(|x| mask.set(b, line, x, 0.0)),
                }
            }
        }
    }
    let plane = h * w;
    for &(start, len) in &pattern.missing {
        mask.data_mut()[start * plane..(start + len) * plane].fill(0.0);
    }
    mask
}

/// Zeroes random stripe groups and missing band ranges; returns
/// `(x ⊙ mask, mask)`.
pub fn apply_stripes(x: &HsiCube, spec: &StripeSpec, seed: u64) -> Result<(HsiCube, HsiCube)> {
    let pattern = realize_stripes(spec, x.dims(), seed)?;
    let mask = pattern_mask(&pattern, x.dims());
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
        if *m == 0.0 {
            *v = 0.0;
        }
    }
    Ok((y, mask))
}

/// Per-band `f × f` block averaging.
pub fn downsample_cube(x: &HsiCube, f: usize) -> Result<HsiCube> {
    let (c, h, w) = x.dims();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(config_err!("cannot downsample {h}x{w} by {f}: sides must be divisible"));
    }
    let norm = 1.0 / (f * f) as f64;
    Ok(HsiCube::from_fn(c, h / f, w / f, |b, y, xx| {
        let mut s = 0.0f64;
        for dy in 0..f {
            for dx in 0..f {
                s += x.get(b, y * f + dy, xx * f + dx) as f64;
            }
        }
        (s * norm) as f32
    }))
}

/// Cubic convolution kernel with `a = −0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output position along one axis
/// (half-pixel centers, edge-clamped).
fn cubic_taps(n_in: usize, f: usize) -> Vec<[(usize, f64); 4]> {
    (0..n_in * f)
        .map(|o| {
            let src = (o as f64 + 0.5) / f as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let i = (base as isize + k as isize - 1).clamp(0, n_in as isize - 1) as usize;
                *tap = (i, cubic_weight(t - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Per-band separable bicubic interpolation by `f` (horizontal pass first).
pub fn bicubic_upsample(x: &HsiCube, f: usize) -> Result<HsiCube> {
    if f == 0 {
        return Err(config_err!("upsampling factor must be positive"));
    }
    let (c, h, w) = x.dims();
    let (oh, ow) = (h * f, w * f);
    let tx = cubic_taps(w, f);
    let ty = cubic_taps(h, f);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut rows = vec![0.0f64; h * ow];
    for b in 0..c {
        let band = x.band(b);
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                rows[y * ow + ox] = taps.iter().map(|&(i, wt)| wt * band[y * w + i] as f64).sum();
            }
        }
        for taps in &ty {
            for ox in 0..ow {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * ow + ox]).sum();
                out.push(v as f32);
            }
        }
    }
    HsiCube::new(c, oh, ow, out)
}
