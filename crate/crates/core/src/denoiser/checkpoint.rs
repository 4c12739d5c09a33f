//! Binary container for model weights and, optionally, optimizer state.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "LDCK"            magic, 4 bytes
//! version           u16 (currently 1)
//! kind              u8: 0 = weights only, 1 = weights + optimizer state
//! header_len        u32
//! header            header_len bytes of UTF-8 `key=value\n` lines
//! tensor group      the weights (see below)
//! -- kind 1 only --
//! step              u64
//! tensor group      Adam first moments
//! tensor group      Adam second moments
//! loss_count        u32
//! losses            loss_count x f64
//!
//! tensor group:
//! count             u32
//! per tensor        u16 name_len, name bytes, u8 rank, rank x u32 dims,
//!                   prod(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use super::params::{NamedTensor, Parameters};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: Parameters,
    pub second_moment: Parameters,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` metadata: model and schedule configuration.
    pub header: Vec<(String, String)>,
    pub params: Parameters,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(u8::from(self.optimizer.is_some()));
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "header entry `{k}` cannot be encoded as a key=value line"
                )));
            }
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        write_group(&mut out, &self.params)?;
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&opt.step.to_le_bytes());
            write_group(&mut out, &opt.first_moment)?;
            write_group(&mut out, &opt.second_moment)?;
            out.extend_from_slice(&(opt.loss_history.len() as u32).to_le_bytes());
            for v in &opt.loss_history {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let kind = r.u8("kind")?;
        if kind > 1 {
            return Err(Error::CorruptHeader(format!("unknown checkpoint kind {kind}")));
        }
        let header_len = r.u32("header length")? as usize;
        let header_text = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| Error::CorruptHeader("header is not UTF-8".into()))?;
        let header = header_text
            .lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::CorruptHeader(format!("malformed header line `{line}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = read_group(&mut r)?;
        let optimizer = if kind == 1 {
            let step = r.u64("step")?;
            let first_moment = read_group(&mut r)?;
            let second_moment = read_group(&mut r)?;
            let n = r.u32("loss count")? as usize;
            let raw = r.take(n * 8, "loss history")?;
            let loss_history = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Some(OptimizerSnapshot {
                step,
                first_moment,
                second_moment,
                loss_history,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_group(out: &mut Vec<u8>, params: &Parameters) -> Result<()> {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.iter() {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {}", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.tensor.shape().len() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_group(r: &mut Reader<'_>) -> Result<Parameters> {
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptHeader(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.saturating_mul(8), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(Parameters::new(entries))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
