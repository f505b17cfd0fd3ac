//! `CGRW` weight files: named f32 tensors, little-endian throughout.
//!
//! ```text
//! "CGRW" | version u32 | count u32 |
//!   count × ( name_len u32 | name | rank u32 | dims u32×rank | f32×numel )
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"CGRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub tensors: Vec<NamedTensor>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "weight",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(format_err(format!(
                "truncated {what} at byte {}: need {n} bytes, {rest} left",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl WeightFile {
    /// Every registry entry, learnable and buffer, in registry order.
    pub fn from_store(store: &ParamStore) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                dims: e.shape.clone(),
                data: e.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        WeightFile { tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&u32_of(t.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&u32_of(t.dims.len(), "rank")?.to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(format_err(format!("{}: dims {:?} do not match {} values", t.name, t.dims, t.data.len())));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err("bad magic, expected CGRW"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(format_err(format!("duplicate tensor {name}")));
            }
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err(format!("{name}: dims {dims:?} overflow")))?;
            let payload = r.take(numel.saturating_mul(4), &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(WeightFile { tensors })
    }

    /// Copies values into `store`. Every store entry must appear with the same
    /// shape and the file may hold nothing else.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for t in &self.tensors {
            let id = store
                .id(&t.name)
                .ok_or_else(|| Error::WeightMismatch(format!("unexpected tensor {}", t.name)))?;
            let want = &store.entry(id).shape;
            if want != &t.dims {
                return Err(Error::WeightMismatch(format!("{}: file has shape {:?}, model expects {:?}", t.name, t.dims, want)));
            }
        }
        if let Some(missing) = store
            .entries()
            .iter()
            .find(|e| !self.tensors.iter().any(|t| t.name == e.name))
        {
            return Err(Error::WeightMismatch(format!("missing tensor {}", missing.name)));
        }
        for t in &self.tensors {
            let id = store.id(&t.name).expect("checked above");
            for (dst, &src) in store.value_mut(id).data_mut().iter_mut().zip(&t.data) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(format!("{what} {v} does not fit in u32")))
}

pub fn save_weights(path: &Path, store: &ParamStore) -> Result<()> {
    let bytes = WeightFile::from_store(store).to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightFile::from_bytes(&bytes)?.apply(store)
}
