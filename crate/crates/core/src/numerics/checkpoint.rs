//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "CQCK" | version = 1 | count
//! repeat count times:
//!     name_len | name (UTF-8) | rank | dims[rank] | data (f64 LE, row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32, NumericsError> {
    u32::try_from(v).map_err(|_| bad(format!("{what} {v} exceeds u32")))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(false);
                (p.name.clone(), t)
            })
            .collect();
        Self { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every entry whose name exists in `store`; returns how many were applied.
    /// Entries absent from the store (metadata, foreign weights) are ignored.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<usize, NumericsError> {
        let mut applied = 0;
        for (name, t) in &self.entries {
            if let Some(p) = store.by_name_mut(name) {
                if p.tensor.shape() != t.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "checkpoint apply",
                        lhs: p.tensor.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                p.tensor.data_mut().copy_from_slice(t.data());
                applied += 1;
            }
        }
        Ok(applied)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NumericsError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&to_u32(self.entries.len(), "parameter count")?.to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&to_u32(t.rank(), "rank")?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(format!("name not UTF-8: {e}")))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NumericsError::Path {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let bytes = std::fs::read(path).map_err(|e| NumericsError::Path {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::read_from(&mut bytes.as_slice())
    }
}
