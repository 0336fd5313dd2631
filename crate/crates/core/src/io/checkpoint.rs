//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MIRG"  u32 version
//! u32 config_len   config_len bytes of UTF-8 `key = value` text
//! u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!             u32 rank, rank x u64 extents, raw little-endian elements
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::config;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MIRG";
pub const VERSION: u32 = 1;

/// One stored tensor with its raw element bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorRecord {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_of());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes the elements, converting precision if the stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size_of();
        let data = self
            .bytes
            .chunks_exact(size)
            .map(|c| match self.dtype {
                DType::F32 => T::from_f64(f32::read_le(c) as f64),
                DType::F64 => T::from_f64(f64::read_le(c)),
            })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated at byte {} reading {what}: need {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} at byte {at} is not UTF-8")))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too long ({n})")))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.config.len(), "config")?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor list")?.to_le_bytes());
        let mut names = HashSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {:?}", t.name)));
            }
            let expected = t.shape.iter().product::<usize>() * t.dtype.size_of();
            if expected != t.bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: {} bytes for shape {:?}",
                    t.name,
                    t.bytes.len(),
                    t.shape
                )));
            }
            out.extend_from_slice(&len_u32(t.name.len(), "tensor name")?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.extend_from_slice(&len_u32(t.shape.len(), "rank")?.to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let config = r.string("config")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        let mut names = HashSet::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            if !names.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
            }
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?}: unknown dtype code {code}")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let e = r.u64("extent")?;
                let e = usize::try_from(e)
                    .ok()
                    .filter(|&e| e > 0)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?}: invalid extent {e}")))?;
                shape.push(e);
            }
            let len = shape
                .iter()
                .try_fold(dtype.size_of(), |acc: usize, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?}: extents {shape:?} overflow")))?;
            let data = r.take(len, &format!("data of {name:?}"))?.to_vec();
            tensors.push(TensorRecord {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        Self {
            config: config::model_to_text(&model.config),
            tensors: model
                .params
                .iter()
                .map(|(name, t)| TensorRecord::from_tensor(name, t))
                .collect(),
        }
    }

    /// Rebuilds the model described by the embedded config and loads every tensor
    /// into it. Missing or unexpected names are an error.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let cfg = config::model_from_text(&self.config)?;
        let mut model = Model::<T>::build(&cfg, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let tensors = self
            .tensors
            .iter()
            .map(|r| Ok((r.name.clone(), r.to_tensor::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        model.params.assign_from(&tensors)
    }
}

pub fn save_model<T: Real>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Checkpoint::load(path)?.to_model()
}
