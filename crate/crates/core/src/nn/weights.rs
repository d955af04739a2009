//! The `.mvqw` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MVQW" | u32 version | u32 count
//! count × { u16 name_len | name (UTF-8) | u8 dtype | u8 rank | rank × u32 dim | u64 offset }
//! payloads: f32 little-endian, `offset` counted from the start of the file
//! ```
//!
//! Only dtype 0 (`f32`) exists.

use std::path::Path;

use log::warn;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVQW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Tensors under this prefix carry metadata rather than model parameters.
pub const META_PREFIX: &str = "__meta__.";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl WeightFile {
    pub fn from_params(params: &ParamSet<f32>) -> Self {
        Self {
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = 12usize;
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor {name} cannot be encoded")));
            }
            header += 2 + name.len() + 2 + 4 * t.shape().len() + 8;
        }
        let mut out = Vec::with_capacity(header + 4 * self.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = header as u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} of {name} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        debug_assert_eq!(out.len(), header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("bad magic, not an MVQW weight file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name} has unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            entries.push((name, shape, offset));
        }
        let header_end = r.pos as u64;
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
        for (name, shape, offset) in &entries {
            let n = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            let end = n
                .and_then(|n| n.checked_mul(4))
                .and_then(|b| offset.checked_add(b))
                .filter(|&e| *offset >= header_end && e <= bytes.len() as u64)
                .ok_or_else(|| Error::Format(format!("payload of tensor {name} lies outside the file")))?;
            spans.push((*offset, end, name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!("payloads of {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let tensors = entries
            .into_iter()
            .map(|(name, shape, offset)| {
                let n: usize = shape.iter().product();
                let start = offset as usize;
                let data = bytes[start..start + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every parameter in `params` with the file's tensor of the
    /// same name. Tensors the model does not use are reported and ignored.
    pub fn load_into(&self, params: &mut ParamSet<f32>) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let t = self.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let current = params.get(name).expect("listed");
            if current.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: current.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for (name, t) in &self.tensors {
            if params.contains(name) {
                params.insert(name.clone(), t.clone());
            } else if !name.starts_with(META_PREFIX) {
                warn!("ignoring unused tensor {name} in weight file");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        let mut f = WeightFile::default();
        f.push("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.0]).unwrap());
        f.push("b", Tensor::scalar(0.125));
        f
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MVQW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 0);
        assert_eq!(bytes[23], 2);
        let header = 12 + (2 + 8 + 2 + 8 + 8) + (2 + 1 + 2 + 4 + 8);
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), header as u64);
        assert_eq!(bytes.len(), header + 4 * 7);
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        assert_eq!(WeightFile::from_bytes(&f.to_bytes().unwrap()).unwrap(), f);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 2;
        assert!(WeightFile::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(WeightFile::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn rejects_overlap() {
        let mut bytes = sample().to_bytes().unwrap();
        // Point the second tensor's payload into the first one.
        let first = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let n = bytes.len();
        let second_offset_at = 40 + 2 + 1 + 2 + 4;
        bytes[second_offset_at..second_offset_at + 8].copy_from_slice(&(first + 4).to_le_bytes());
        assert_eq!(bytes.len(), n);
        assert!(WeightFile::from_bytes(&bytes).unwrap_err().to_string().contains("overlap"));
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let f = sample();
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::zeros(&[2, 3]));
        f.load_into(&mut params).unwrap();
        assert_eq!(params.get("a.weight").unwrap(), f.get("a.weight").unwrap());

        let mut wrong = ParamSet::new();
        wrong.insert("a.weight", Tensor::zeros(&[3, 2]));
        assert!(matches!(f.load_into(&mut wrong), Err(Error::ShapeMismatch { .. })));

        let mut missing = ParamSet::new();
        missing.insert("c", Tensor::zeros(&[1]));
        let err = f.load_into(&mut missing).unwrap_err();
        assert!(err.to_string().contains('c'));
    }
}
