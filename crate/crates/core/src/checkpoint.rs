//! Binary checkpoint encoding.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic        8 bytes  "MIBCKPT1"
//! version      u32
//! step         u32
//! seed         u64
//! digest       32 bytes (config digest)
//! n_layers     u32
//! per layer:   in u32, out u32, relu u8,
//!              kernels f64 x (out*in*9), biases f64 x out
//! feature_dim  u32
//! n_classes    u32
//! class ids    u8 x n_classes
//! weights      f64 x (n_classes*feature_dim)
//! biases       f64 x n_classes
//! checksum     u64  FNV-1a over every preceding byte
//! ```

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labelspace::{ClassId, ClassSet};
use crate::model::{ClassifierHead, ConvLayer, SegModel};

pub const MAGIC: &[u8; 8] = b"MIBCKPT1";
pub const VERSION: u32 = 1;

/// Upper bound on any single tensor length accepted by the decoder, so a
/// corrupted length field cannot trigger a huge allocation.
const MAX_TENSOR: usize = 1 << 26;

pub type ConfigDigest = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub step: u32,
    pub seed: u64,
    pub config_digest: ConfigDigest,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.step);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        put_u32(&mut out, self.model.layers().len() as u32);
        for layer in self.model.layers() {
            put_u32(&mut out, layer.in_channels as u32);
            put_u32(&mut out, layer.out_channels as u32);
            out.push(layer.relu as u8);
            put_reals(&mut out, &layer.kernels);
            put_reals(&mut out, &layer.biases);
        }
        let head = self.model.head();
        put_u32(&mut out, head.feature_dim as u32);
        put_u32(&mut out, head.classes.len() as u32);
        out.extend(head.classes.iter().map(|c| c.0));
        put_reals(&mut out, &head.weights);
        put_reals(&mut out, &head.biases);
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Checkpoint(format!("truncated: {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != fnv1a(body) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let step = r.u32()?;
        let seed = r.u64()?;
        let config_digest: ConfigDigest = r.take(32)?.try_into().expect("32 bytes");
        let n_layers = r.len()?;
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let in_channels = r.len()?;
            let out_channels = r.len()?;
            let relu = match r.take(1)?[0] {
                0 => false,
                1 => true,
                v => return Err(Error::Checkpoint(format!("bad activation flag {v}"))),
            };
            let kernels = r.reals(checked_len(&[out_channels, in_channels, 9])?)?;
            let biases = r.reals(out_channels)?;
            layers.push(ConvLayer {
                in_channels,
                out_channels,
                kernels,
                biases,
                relu,
            });
        }
        let feature_dim = r.len()?;
        let n_classes = r.len()?;
        let classes = ClassSet::new(r.take(n_classes)?.iter().map(|&b| ClassId(b)))
            .map_err(|e| Error::Checkpoint(format!("class list: {e}")))?;
        if classes.len() != n_classes {
            return Err(Error::Checkpoint("duplicate class ids".into()));
        }
        let weights = r.reals(checked_len(&[n_classes, feature_dim])?)?;
        let biases = r.reals(n_classes)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        let model = SegModel::from_parts(
            layers,
            ClassifierHead {
                classes,
                feature_dim,
                weights,
                biases,
            },
        )
        .map_err(|e| Error::Checkpoint(format!("invalid model: {e}")))?;
        Ok(Self {
            model,
            step,
            seed,
            config_digest,
        })
    }

    /// Decodes and rejects checkpoints written under a different config.
    pub fn decode_expecting(bytes: &[u8], digest: &ConfigDigest) -> Result<Self> {
        let ckpt = Self::decode(bytes)?;
        if &ckpt.config_digest != digest {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {}, expected {}",
                hex(&ckpt.config_digest),
                hex(digest)
            )));
        }
        Ok(ckpt)
    }
}

pub fn hex(bytes: &[u8]) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn checked_len(factors: &[usize]) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .filter(|&n| n <= MAX_TENSOR)
        .ok_or_else(|| Error::Checkpoint(format!("tensor size {factors:?} out of range")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_reals(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > MAX_TENSOR {
            return Err(Error::Checkpoint(format!("length {n} out of range")));
        }
        Ok(n)
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(checked_len(&[n, 8])?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
