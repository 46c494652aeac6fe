//! Binary checkpoints holding the model configuration, every parameter
//! array and (optionally) the optimizer moments.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "HRSTCKPT"
//! version   u32
//! config    u32 length + UTF-8 TOML
//! step      u64
//! seed      u64
//! has_opt   u8, then u64 optimizer step when set
//! arrays    u32 count, then per array:
//!           u32 name length + UTF-8 name, u32 rank, rank × u64 dims,
//!           f64 values
//! ```
//!
//! Optimizer moments are stored as arrays named `optimizer.m.<key>` and
//! `optimizer.v.<key>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ModelState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 8] = b"HRSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: ModelState,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(config: &ModelConfig, state: &ModelState, opt: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &config.to_toml()?);
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.seed);
    match opt {
        Some(o) => {
            out.push(1);
            put_u64(&mut out, o.step);
        }
        None => out.push(0),
    }
    let n = state.params.len() + opt.map_or(0, |o| o.m.len() + o.v.len());
    put_u32(&mut out, n as u32);
    for (k, t) in state.params.iter() {
        put_array(&mut out, k, t);
    }
    if let Some(o) = opt {
        for (k, t) in o.m.iter() {
            put_array(&mut out, &format!("{M_PREFIX}{k}"), t);
        }
        for (k, t) in o.v.iter() {
            put_array(&mut out, &format!("{V_PREFIX}{k}"), t);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("array too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

/// Decodes a checkpoint and checks its arrays against the parameter layout
/// implied by the stored configuration.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unknown checkpoint version {version}")));
    }
    let config = ModelConfig::from_toml(&r.string()?)?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let opt_step = match r.u8()? {
        0 => None,
        1 => Some(r.u64()?),
        b => return Err(Error::Format(format!("bad optimizer flag {b}"))),
    };
    let n = r.u32()? as usize;
    let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    for _ in 0..n {
        let (name, t) = r.array()?;
        if let Some(k) = name.strip_prefix(M_PREFIX) {
            m.insert(k, t);
        } else if let Some(k) = name.strip_prefix(V_PREFIX) {
            v.insert(k, t);
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }
    let layout = build_model(&config, 0)?.params;
    check_layout(&layout, &params, "parameter")?;
    let optimizer = match opt_step {
        Some(s) => {
            check_layout(&layout, &m, "first-moment")?;
            check_layout(&layout, &v, "second-moment")?;
            Some(OptimizerState { step: s, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        config,
        state: ModelState { params, step, seed },
        optimizer,
    })
}

fn check_layout(expected: &ParamStore, got: &ParamStore, what: &str) -> Result<()> {
    for (k, t) in expected.iter() {
        match got.get(k) {
            None => return Err(Error::Format(format!("checkpoint lacks {what} array `{k}`"))),
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::Format(format!(
                    "checkpoint {what} `{k}` has shape {:?}, config implies {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if got.len() != expected.len() {
        let extra = got
            .keys()
            .find(|k| expected.get(k).is_none())
            .cloned()
            .unwrap_or_default();
        return Err(Error::Format(format!(
            "checkpoint has unexpected {what} array `{extra}`"
        )));
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    state: &ModelState,
    opt: Option<&OptimizerState>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(config, state, opt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
