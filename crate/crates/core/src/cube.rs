//! Hyperspectral cubes and their on-disk format.
//!
//! A cube file is a raw little-endian `f32` payload in band-sequential order
//! (all of band 0, then band 1, ...) with a TOML sidecar at `<path>.toml`
//! describing its shape. The byte offset of voxel `(band, row, col)` is
//! `4 · (band·H·W + row·W + col)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const CUBE_FORMAT_VERSION: u32 = 1;

/// A `C × H × W` image cube.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "cube {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let o = self.offset(c, y, x);
        self.data[o] = v;
    }

    pub fn band(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_shape(&self, other: &HsiCube) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "cube shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            ));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("cube dims match payload")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(shape_err!("cube tensor must be 3-D, got {:?}", s));
        }
        Self::new(s[0], s[1], s[2], t.data().iter().map(|&v| v as f32).collect())
    }

    /// Copy of the spatial window at `(y, x)` of size `h × w`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(shape_err!(
                "crop {h}x{w} at ({y},{x}) outside {}x{}",
                self.height,
                self.width
            ));
        }
        Ok(Self::from_fn(self.channels, h, w, |c, yy, xx| {
            self.get(c, y + yy, x + xx)
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sidecar header of a cube file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub format_version: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub layout: String,
    pub value_range: [f32; 2],
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn write_cube(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) = cube
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let header = CubeHeader {
        format_version: CUBE_FORMAT_VERSION,
        channels: cube.channels,
        height: cube.height,
        width: cube.width,
        dtype: "f32".into(),
        layout: "band-sequential".into(),
        value_range: if cube.data.is_empty() { [0.0, 0.0] } else { [lo, hi] },
    };
    let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let hp = header_path(path);
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: CubeHeader = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", hp.display())))?;
    if header.format_version != CUBE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unknown cube format version {}",
            hp.display(),
            header.format_version
        )));
    }
    if header.dtype != "f32" || header.layout != "band-sequential" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype/layout {}/{}",
            hp.display(),
            header.dtype,
            header.layout
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.channels * header.height * header.width;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::Format(format!(
            "{}: header claims {}x{}x{} = {expected} floats but payload holds {} bytes ({} floats)",
            path.display(),
            header.channels,
            header.height,
            header.width,
            bytes.len(),
            bytes.len() as f64 / 4.0
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    HsiCube::new(header.channels, header.height, header.width, data)
}
