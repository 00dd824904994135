//! Versioned binary checkpoint.
//!
//! ```text
//! magic       8 bytes   "CAPDIFF\0"
//! version     u32 LE
//! dtype       u8        4 = f32, 8 = f64
//! header_len  u32 LE
//! header      UTF-8     model hyperparameters (opaque to this crate)
//! count       u32 LE
//! count × entry:
//!   name_len  u32 LE
//!   name      UTF-8
//!   rank      u32 LE
//!   dims      rank × u64 LE
//!   values    prod(dims) × dtype, little endian
//! ```

use std::io::{Read, Write};

use crate::{DType, Error, ParamStore, Real, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPDIFF\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub header: String,
    pub entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn from_params(header: impl Into<String>, params: &ParamStore<F>) -> Self {
        Checkpoint {
            header: header.into(),
            entries: params.export(),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries
            .iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    /// Entries whose names start with `prefix`, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        self.entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = DType::from_tag(cur.take(1)?[0])
            .ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        if dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {dtype:?}, requested {:?}",
                F::DTYPE
            )));
        }
        let header = cur.string()?;
        let count = cur.u32()? as usize;
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * width)?;
            let data = raw.chunks_exact(width).map(F::read_le).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { header, entries })
    }

    /// Reads only the dtype tag, to pick the element type before a full load.
    pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
        if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        DType::from_tag(bytes[12]).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ps = ParamStore::<f32>::new();
        ps.add(
            "enc.0.wq",
            Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-8]).unwrap(),
        )
        .unwrap();
        ps.add("bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let ck = Checkpoint::from_params(r#"{"d_model":2}"#, &ps);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((n0, t0), (n1, t1)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(Checkpoint::<f32>::peek_dtype(&bytes).unwrap(), DType::F32);
    }

    #[test]
    fn wrong_dtype_and_truncation_are_errors() {
        let ck = Checkpoint::<f64> {
            header: String::new(),
            entries: vec![("x".into(), Tensor::zeros(&[4]))],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }
}
