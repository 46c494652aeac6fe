//! Three-band RGB previews with a per-band percentile stretch.

use hyper_restormer::cube::HsiCube;

pub const LOW_PERCENTILE: f64 = 2.0;
pub const HIGH_PERCENTILE: f64 = 98.0;

/// Linear-interpolated percentile of `values` (`p` in percent).
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Maps one band to 8 bits; a band with no spread maps to mid-gray.
pub fn stretch_band(band: &[f32]) -> Vec<u8> {
    let lo = percentile(band, LOW_PERCENTILE);
    let hi = percentile(band, HIGH_PERCENTILE);
    band.iter()
        .map(|&v| {
            if hi <= lo {
                128
            } else {
                let t = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
                (t * 255.0).round() as u8
            }
        })
        .collect()
}

/// Interleaved RGB bytes, row-major.
pub fn rgb_preview(cube: &HsiCube, bands: [usize; 3]) -> Vec<u8> {
    let planes: Vec<Vec<u8>> = bands.iter().map(|&b| stretch_band(cube.band(b))).collect();
    let n = cube.height() * cube.width();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        out.extend(planes.iter().map(|p| p[i]));
    }
    out
}
