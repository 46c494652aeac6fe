//! Quality metrics: mean per-band PSNR, mean per-band SSIM and mean
//! spectral angle.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{shape_err, Error, Result};

/// Reported for bands that match exactly.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Spectra with a smaller norm contribute a zero angle.
pub const SAM_MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpsnr: f64,
    pub mssim: f64,
    /// Degrees.
    pub sam: f64,
    pub per_band_psnr: Vec<f64>,
    pub per_band_ssim: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(reference: &HsiCube, test: &HsiCube) -> Result<Self> {
        let per_band_psnr = band_psnr(reference, test)?;
        let per_band_ssim = band_ssim(reference, test)?;
        Ok(Self {
            mpsnr: mean(&per_band_psnr),
            mssim: mean(&per_band_ssim),
            sam: sam(reference, test)?,
            per_band_psnr,
            per_band_ssim,
        })
    }

    /// Key-value text (TOML).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    pub fn table_header() -> &'static str {
        "mpsnr\tmssim\tsam"
    }

    /// Tab-separated `mpsnr mssim sam`.
    pub fn table_row(&self) -> String {
        format!("{:.4}\t{:.6}\t{:.4}", self.mpsnr, self.mssim, self.sam)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mpsnr={:.1}, mssim={:.1}, sam={:.1}",
            self.mpsnr, self.mssim, self.sam
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn band_psnr(reference: &HsiCube, test: &HsiCube) -> Result<Vec<f64>> {
    reference.same_shape(test)?;
    Ok((0..reference.channels())
        .map(|b| {
            let (r, t) = (reference.band(b), test.band(b));
            let mse = r
                .iter()
                .zip(t)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                / r.len().max(1) as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (-10.0 * mse.log10()).min(PSNR_CAP)
            }
        })
        .collect())
}

pub fn mpsnr(reference: &HsiCube, test: &HsiCube) -> Result<f64> {
    Ok(mean(&band_psnr(reference, test)?))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of a single band pair (mean of the SSIM map over the valid region).
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

pub fn band_ssim(reference: &HsiCube, test: &HsiCube) -> Result<Vec<f64>> {
    reference.same_shape(test)?;
    let (c, h, w) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    Ok((0..c)
        .into_par_iter()
        .map(|b| ssim_plane(reference.band(b), test.band(b), h, w))
        .collect())
}

pub fn mssim(reference: &HsiCube, test: &HsiCube) -> Result<f64> {
    Ok(mean(&band_ssim(reference, test)?))
}

/// Per-pixel spectral angles in degrees, raster order.
pub fn sam_map(reference: &HsiCube, test: &HsiCube) -> Result<Vec<f64>> {
    reference.same_shape(test)?;
    let (c, h, w) = reference.dims();
    let plane = h * w;
    let (r, t) = (reference.data(), test.data());
    Ok((0..plane)
        .map(|p| {
            let (mut dot, mut nr, mut nt) = (0.0f64, 0.0f64, 0.0f64);
            for b in 0..c {
                let (u, v) = (r[b * plane + p] as f64, t[b * plane + p] as f64);
                dot += u * v;
                nr += u * u;
                nt += v * v;
            }
            if nr.sqrt() < SAM_MIN_NORM || nt.sqrt() < SAM_MIN_NORM {
                0.0
            } else {
                // single rounded sqrt so parallel spectra give exactly 1
                (dot / (nr * nt).sqrt()).clamp(-1.0, 1.0).acos().to_degrees()
            }
        })
        .collect())
}

pub fn sam(reference: &HsiCube, test: &HsiCube) -> Result<f64> {
    Ok(mean(&sam_map(reference, test)?))
}
