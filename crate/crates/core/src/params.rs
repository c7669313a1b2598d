//! Named parameter storage and the `CIMW` weight file format.
//!
//! Layout (little-endian): magic `CIMW`, u32 version, u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name, u32 rank, rank × u32 extents, f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::{BatchStats, Gradients, Graph, Var};
use crate::error::{CimError, Result};
use crate::tensor::Tensor;

pub const CIMW_MAGIC: &[u8; 4] = b"CIMW";
pub const CIMW_VERSION: u32 = 1;

/// Role of a stored tensor, derived from its name suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Running statistics; persisted but not learned.
    Buffer,
}

impl ParamRole {
    pub fn of(name: &str) -> Self {
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            ParamRole::Buffer
        } else if name.ends_with(".gamma") {
            ParamRole::BnScale
        } else if name.ends_with(".beta") {
            ParamRole::BnShift
        } else if name.ends_with(".bias") {
            ParamRole::Bias
        } else {
            ParamRole::Weight
        }
    }

    pub fn is_learnable(self) -> bool {
        self != ParamRole::Buffer
    }
}

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

/// Graph leaves holding a copy of every learnable tensor.
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CimError::Config(format!("missing parameter {name}")))
    }

    /// Route `name` through an existing graph variable instead of its registered leaf.
    pub fn substitute(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| CimError::Config(format!("missing parameter {name}")))?;
        *slot = var;
        Ok(())
    }

    /// Gradients for every registered parameter, zero where the graph did not reach.
    pub fn collect(&self, graph: &Graph, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CimError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CimError::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn learnable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| ParamRole::of(n).is_learnable())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Put every learnable tensor on the graph as a leaf.
    pub fn register(&self, graph: &mut Graph) -> Result<ParamVars> {
        let mut vars = IndexMap::new();
        for (name, t) in self.iter() {
            if ParamRole::of(name).is_learnable() {
                vars.insert(name.to_string(), graph.leaf(t.clone())?);
            }
        }
        Ok(ParamVars { vars })
    }

    /// Exponential running-statistics update: `r ← (1 − m)·r + m·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (prefix, stats) in updates {
            let rm = self.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let rv = self.get_mut(&format!("{prefix}.running_var"))?;
            for (r, b) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    pub fn to_cimw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CIMW_MAGIC);
        out.extend_from_slice(&CIMW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_cimw_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CIMW_MAGIC {
            return Err(CimError::Format("bad magic, expected CIMW".into()));
        }
        let version = r.u32()?;
        if version != CIMW_VERSION {
            return Err(CimError::Format(format!("unsupported CIMW version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CimError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| CimError::Format("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(name, Tensor::new(&shape, data).map_err(|e| CimError::Format(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(CimError::Format("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_cimw_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_cimw_bytes(&buf)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CimError::Format(format!(
                "truncated file: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
