//! `MDE1` tensor container used for checkpoints and feature-extractor weights.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MDE1" | version u32 | record* | 0u32 | rng seed [u8; 32] | rng stream u64 | rng word u128 | step u64
//! record = name_len u32 | name | dtype u8 | ndim u32 | dims u64 * ndim | payload
//! ```
//!
//! A zero name length ends the record list. Dtype tags: 0 = f32, 1 = f64, 2 = raw bytes.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MDE1";
pub const VERSION: u32 = 1;
const BYTES_TAG: u8 = 2;
const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl From<Tensor<f32>> for Entry {
    fn from(t: Tensor<f32>) -> Self {
        Entry::F32(t)
    }
}

impl From<Tensor<f64>> for Entry {
    fn from(t: Tensor<f64>) -> Self {
        Entry::F64(t)
    }
}

/// Resumable position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub entries: Vec<(String, Entry)>,
    pub rng: RngState,
    pub step: u64,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, entry: impl Into<Entry>) {
        self.entries.push((name.into(), entry.into()));
    }

    /// Adds every tensor of `set` under `prefix`.
    pub fn push_set<T: Scalar>(&mut self, prefix: &str, set: &ParamSet<T>)
    where
        Entry: From<Tensor<T>>,
    {
        for (k, v) in set.iter() {
            self.push(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn get_f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            Entry::F32(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("record `{name}` is not f32"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.get(name)? {
            Entry::F64(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("record `{name}` is not f64"))),
        }
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Entry::Bytes(b) => Ok(b),
            _ => Err(Error::Checkpoint(format!("record `{name}` is not a byte record"))),
        }
    }

    /// Every f32 tensor whose name starts with `prefix`, with the prefix removed.
    pub fn take_set_f32(&self, prefix: &str) -> ParamSet<f32> {
        let mut set = ParamSet::new();
        for (k, v) in &self.entries {
            if let (Some(rest), Entry::F32(t)) = (k.strip_prefix(prefix), v) {
                set.insert(rest, t.clone());
            }
        }
        set
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, entry) in &self.entries {
            if name.is_empty() || name.len() > MAX_NAME {
                return Err(Error::Checkpoint(format!("record name length {} unsupported", name.len())));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims: Vec<usize> = match entry {
                Entry::F32(t) => t.shape().to_vec(),
                Entry::F64(t) => t.shape().to_vec(),
                Entry::Bytes(b) => vec![b.len()],
            };
            let tag = match entry {
                Entry::F32(_) => DType::F32.tag(),
                Entry::F64(_) => DType::F64.tag(),
                Entry::Bytes(_) => BYTES_TAG,
            };
            out.push(tag);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Archive> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not an MDE1 archive".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut entries = Vec::new();
        loop {
            let at = r.pos;
            let name_len = r.u32("name length")? as usize;
            if name_len == 0 {
                break;
            }
            if name_len > MAX_NAME {
                return Err(Error::Checkpoint(format!("name length {name_len} at byte {at}")));
            }
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("record name at byte {at} is not UTF-8")))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let ndim = r.u32("ndim")? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("record `{name}`: ndim {ndim}")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64("dims")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c > 0)
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: bad dims {dims:?}")))?;
            let entry = if tag == BYTES_TAG {
                Entry::Bytes(r.take(count, "payload")?.to_vec())
            } else {
                match DType::from_tag(tag) {
                    Some(DType::F32) => Entry::F32(read_tensor::<f32>(&mut r, dims, count)?),
                    Some(DType::F64) => Entry::F64(read_tensor::<f64>(&mut r, dims, count)?),
                    None => return Err(Error::Checkpoint(format!("record `{name}`: unknown dtype tag {tag}"))),
                }
            };
            entries.push((name, entry));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32, "rng seed")?);
        let stream = r.u64("rng stream")?;
        let word_pos = LittleEndian::read_u128(r.take(16, "rng position")?);
        let step = r.u64("step")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the step counter",
                bytes.len() - r.pos
            )));
        }
        Ok(Archive {
            entries,
            rng: RngState { seed, stream, word_pos },
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader, dims: Vec<usize>, count: usize) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let payload = r.take(
        count
            .checked_mul(size)
            .ok_or_else(|| Error::Checkpoint("payload size overflow".into()))?,
        "payload",
    )?;
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(dims, data)
}
