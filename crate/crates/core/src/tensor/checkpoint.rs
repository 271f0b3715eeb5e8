//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BMTC" | u32 version | u64 config_len | config (UTF-8 JSON)
//! u64 param_count
//! per parameter: u32 name_len | name | u32 ndim | u64 dim × ndim | f64 × numel
//! ```

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"BMTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Fully resolved hyperparameter configuration, serialized as JSON.
    pub config_json: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(config_json: String, store: &ParamStore) -> Self {
        Checkpoint {
            config_json,
            params: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone().with_grad(false)))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u64()? as usize;
        let at = r.pos;
        let config_json =
            String::from_utf8(r.take(config_len)?.to_vec()).map_err(|_| Error::format(at, "config is not UTF-8"))?;
        let count = r.u64()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let at = r.pos;
            let payload = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format(at, "shape overflow"))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last parameter"));
        }
        Ok(Checkpoint { config_json, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let mut store = ParamStore::new();
        store
            .register(
                "encoder.layer0.self_att_a.Wq.head0",
                Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-300, f64::MAX, -0.0]).unwrap(),
            )
            .unwrap();
        store.register("b", Tensor::scalar(7.0)).unwrap();
        let ck = Checkpoint::from_store("{\"x\":1}".into(), &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config_json, "{\"x\":1}");
        let mut other = store.clone();
        let id = other.id("b").unwrap();
        other.get_mut(id).data_mut()[0] = 9.0;
        other.load_named(back.params).unwrap();
        assert!(other.bit_identical(&store, ""));
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[4])).unwrap();
        let bytes = Checkpoint::from_store(String::new(), &store).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let err = Checkpoint::from_bytes(b"NOPE").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }
}
