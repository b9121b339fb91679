use std::path::Path;

use super::{Gradients, Tape, Tensor, Var};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SIAINCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of learned tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters recorded as leaves on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Stores the gradient of every parameter (zero when unreachable).
    pub fn collect_grads(&mut self, grads: &Gradients, bound: &BoundParams) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            t.grad = Some(grads.wrt(v));
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.total_values() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint into a fresh store.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len(), 0)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint {
                version: 0,
                detail: "missing checkpoint magic".into(),
            });
        }
        let version = r.u32(0)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                version,
                detail: format!("unsupported version, expected {CHECKPOINT_VERSION}"),
            });
        }
        let mut store = ParamStore::new();
        while !r.done() {
            let len = r.u32(version)? as usize;
            let name = String::from_utf8(r.take(len, version)?.to_vec()).map_err(|_| {
                Error::Checkpoint { version, detail: "entry name is not UTF-8".into() }
            })?;
            let rank = r.u32(version)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32(version).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(count * 4, version)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Replaces this store's values with a checkpoint whose entry names and
    /// shapes match exactly, in order.
    pub fn load_matching(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = ParamStore::from_bytes(bytes)?;
        if loaded.len() != self.len() {
            return Err(Error::Checkpoint {
                version: CHECKPOINT_VERSION,
                detail: format!(
                    "checkpoint has {} entries, model expects {}",
                    loaded.len(),
                    self.len()
                ),
            });
        }
        for ((name, t), (lname, lt)) in self.iter().zip(loaded.iter()) {
            if name != lname || t.shape() != lt.shape() {
                return Err(Error::Checkpoint {
                    version: CHECKPOINT_VERSION,
                    detail: format!(
                        "model entry {name} {:?} does not match checkpoint entry {lname} {:?}",
                        t.shape(),
                        lt.shape()
                    ),
                });
            }
        }
        self.tensors = loaded.tensors;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_matching(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize, version: u32) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint { version, detail: "truncated checkpoint".into() });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, version: u32) -> Result<u32> {
        let b = self.take(4, version)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
