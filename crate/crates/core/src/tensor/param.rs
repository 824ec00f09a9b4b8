//! Named parameter collections and their binary snapshot format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"VPFL"
//! version  u32
//! count    u32            number of entries
//! flags    u32            reserved; bit 0 = frozen
//! entries  count × { name_len u16, name utf-8, rank u8, extents u32[rank], values f64[] }
//! ```

use std::collections::HashSet;

use super::{Result, Tensor, TensorError};

pub const PARAM_MAGIC: &[u8; 4] = b"VPFL";
pub const PARAM_WIRE_VERSION: u32 = 1;
const FLAG_FROZEN: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("invalid entry `{name}`: {detail}")]
    Entry { name: String, detail: String },
    #[error("{0} trailing bytes after last entry")]
    Trailing(usize),
}

/// Ordered (name, tensor) list; the unit exchanged between clients and server.
#[derive(Debug, Clone, Default)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut pv = ParamVector::new();
        for (name, t) in entries {
            pv.push(name, t)?;
        }
        Ok(pv)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Appends every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamVector) -> Result<()> {
        for (n, t) in &other.entries {
            self.push(format!("{prefix}{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn select_prefixed(&self, prefix: &str) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Independent storage for every entry; grads are not copied.
    pub fn deep_copy(&self) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.deep_copy()))
                .collect(),
        }
    }

    /// Copy whose leaves do not require grad (used for frozen anchors).
    pub fn frozen_copy(&self) -> ParamVector {
        self.with_requires_grad(false)
    }

    pub fn with_requires_grad(&self, requires_grad: bool) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let leaf = Tensor::leaf(t.shape(), t.data().to_vec(), requires_grad)
                        .expect("copy of a valid tensor");
                    (n.clone(), leaf)
                })
                .collect(),
        }
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, t)| t.zero_grad());
    }

    /// All values concatenated in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Errors with the first entry whose name or shape differs.
    pub fn check_aligned(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(TensorError::Contract(format!(
                "entry count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(TensorError::Contract(format!("entry name `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(TensorError::Contract(format!(
                    "entry `{na}` shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Builds a vector with this layout from per-entry values.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<ParamVector> {
        if values.len() != self.len() {
            return Err(TensorError::Contract("value list length mismatch".into()));
        }
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|((n, t), v)| Ok((n.clone(), Tensor::leaf(t.shape(), v, t.requires_grad())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVector { entries })
    }

    /// Bit-level equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.check_aligned(other).is_ok()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn to_bytes(&self, frozen: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.total_len() * 8 + self.len() * 32);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(if frozen { FLAG_FROZEN } else { 0 }).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a snapshot; returns the vector and its frozen flag. Frozen
    /// entries are loaded without requires_grad.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(ParamVector, bool), WireError> {
        let (pv, frozen, used) = Self::read_prefix(bytes)?;
        if used != bytes.len() {
            return Err(WireError::Trailing(bytes.len() - used));
        }
        Ok((pv, frozen))
    }

    /// Like [`from_bytes`](Self::from_bytes) but tolerates trailing data and
    /// reports how many bytes were consumed.
    pub fn read_prefix(bytes: &[u8]) -> std::result::Result<(ParamVector, bool, usize), WireError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != PARAM_MAGIC {
            return Err(WireError::Magic(magic));
        }
        let version = r.u32()?;
        if version != PARAM_WIRE_VERSION {
            return Err(WireError::Version(version));
        }
        let count = r.u32()? as usize;
        let frozen = r.u32()? & FLAG_FROZEN != 0;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| WireError::Entry {
                name: String::from("<non-utf8>"),
                detail: e.to_string(),
            })?;
            if !seen.insert(name.clone()) {
                return Err(WireError::Entry {
                    name,
                    detail: "duplicate name".into(),
                });
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::leaf(&shape, data, !frozen).map_err(|e| WireError::Entry {
                name: name.clone(),
                detail: e.to_string(),
            })?;
            entries.push((name, t));
        }
        Ok((ParamVector { entries }, frozen, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated(self.pos))?;
        let s = self.bytes.get(self.pos..end).ok_or(WireError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
