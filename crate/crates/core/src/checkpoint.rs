//! Little-endian binary checkpoints.
//!
//! ```text
//! magic    "CLPR"
//! version  u32
//! dim      u32            embedding dimension d
//! tag      [u8; 4]        "DENC" dual encoder, "PRIR" diffusion prior
//! n_meta   u32, then n_meta × (len u32, utf8 key, len u32, utf8 value)
//! n_layer  u32, then n_layer × (len u32, utf8 name, ndim u32, ndim × u32 dims,
//!                               prod(dims) × f32 payload)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLPR";
pub const VERSION: u32 = 1;
pub const TAG_ENCODER: [u8; 4] = *b"DENC";
pub const TAG_PRIOR: [u8; 4] = *b"PRIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: [u8; 4],
    pub dim: u32,
    pub meta: BTreeMap<String, String>,
    pub layers: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(tag: [u8; 4], dim: usize) -> Self {
        Self {
            tag,
            dim: dim as u32,
            meta: BTreeMap::new(),
            layers: Vec::new(),
        }
    }

    pub fn layer(&self, name: &str) -> Result<&Tensor<f32>> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing layer `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing meta key `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.dim);
        out.extend_from_slice(&self.tag);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.layers.len() as u32);
        for (name, t) in &self.layers {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()?;
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let n_layers = r.u32()?;
        let mut layers = Vec::with_capacity(n_layers as usize);
        for _ in 0..n_layers {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("layer `{name}`: {e}")))?;
            layers.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            tag,
            dim,
            meta,
            layers,
        })
    }

    pub fn expect_tag(&self, tag: [u8; 4]) -> Result<()> {
        if self.tag == tag {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected section tag {:?}, found {:?}",
                String::from_utf8_lossy(&tag),
                String::from_utf8_lossy(&self.tag)
            )))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
