//! Synthetic low-rank scenes for desk-scale experiments.
//!
//! A scene is a linear mixture `Σ_k a_k(x, y) · s_k(λ)` of `mixture_order`
//! smooth positive spectra with smooth, nonnegative, sum-to-one abundance
//! fields, scaled so its maximum is `peak`. The band × pixel unfolding has
//! rank at most `mixture_order`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Number of endmember spectra.
    pub mixture_order: usize,
    /// Random plane waves summed per abundance logit field.
    pub waves: usize,
    /// Highest spatial frequency in cycles per image side.
    pub max_frequency: f64,
    /// Logit scale; larger values give crisper material boundaries.
    pub sharpness: f64,
    /// Gaussian bumps per spectrum.
    pub spectral_bumps: usize,
    pub peak: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            bands: 8,
            mixture_order: 3,
            waves: 4,
            max_frequency: 3.0,
            sharpness: 3.0,
            spectral_bumps: 3,
            peak: 0.9,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 || self.mixture_order == 0 {
            return Err(config_err!("scene dimensions and mixture order must be positive"));
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return Err(config_err!("scene peak must lie in (0, 1], got {}", self.peak));
        }
        Ok(())
    }
}

/// Endmember spectra `[k][band]`, strictly positive.
pub fn synth_spectra(spec: &SyntheticSceneSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let c = spec.bands;
    (0..spec.mixture_order)
        .map(|_| {
            let base = rng.random_range(0.1..0.4);
            let tilt = rng.random_range(-0.2..0.2);
            let bumps: Vec<(f64, f64, f64)> = (0..spec.spectral_bumps)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.08..0.3),
                        rng.random_range(0.1..0.8),
                    )
                })
                .collect();
            (0..c)
                .map(|b| {
                    let l = if c == 1 { 0.5 } else { b as f64 / (c - 1) as f64 };
                    let bump: f64 = bumps
                        .iter()
                        .map(|&(mu, w, a)| a * (-(l - mu).powi(2) / (2.0 * w * w)).exp())
                        .sum();
                    (base + tilt * (l - 0.5) + bump).max(0.02)
                })
                .collect()
        })
        .collect()
}

/// Abundance fields `[k][y·W + x]`; nonnegative and summing to one per pixel.
pub fn synth_abundances(spec: &SyntheticSceneSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let (h, w, k) = (spec.height, spec.width, spec.mixture_order);
    let logits: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let waves: Vec<(f64, f64, f64, f64)> = (0..spec.waves)
                .map(|_| {
                    (
                        rng.random_range(-spec.max_frequency..=spec.max_frequency),
                        rng.random_range(-spec.max_frequency..=spec.max_frequency),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.5..1.0),
                    )
                })
                .collect();
            let mut field = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                    let s: f64 = waves
                        .iter()
                        .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * u + fy * v) + ph).cos())
                        .sum();
                    field.push(spec.sharpness * s);
                }
            }
            field
        })
        .collect();
    let mut out = vec![vec![0.0; h * w]; k];
    for p in 0..h * w {
        let m = (0..k).map(|j| logits[j][p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|j| (logits[j][p] - m).exp()).sum();
        for j in 0..k {
            out[j][p] = (logits[j][p] - m).exp() / z;
        }
    }
    out
}

pub fn synth_scene(spec: &SyntheticSceneSpec) -> Result<HsiCube> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spectra = synth_spectra(spec, &mut rng);
    let abund = synth_abundances(spec, &mut rng);
    let (c, h, w) = (spec.bands, spec.height, spec.width);
    let mut data = vec![0.0f64; c * h * w];
    for b in 0..c {
        for p in 0..h * w {
            data[b * h * w + p] = (0..spec.mixture_order).map(|k| abund[k][p] * spectra[k][b]).sum();
        }
    }
    let max = data.iter().cloned().fold(0.0, f64::max);
    let scale = spec.peak / max;
    HsiCube::new(c, h, w, data.into_iter().map(|v| (v * scale) as f32).collect())
}
