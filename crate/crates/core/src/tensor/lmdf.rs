//! `LMDF` tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! "LMDF" | u32 version (=1) | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 rank
//!             | rank x u32 extents | u64 payload offset
//! payloads: row-major, each starting at a 64-byte aligned file offset
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LMDF";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

/// A tensor of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding when narrowing.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn payload_len(&self) -> usize {
        self.shape().iter().product::<usize>() * self.dtype().size()
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// One row of a container manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntryInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lmdf {
    entries: Vec<(String, AnyTensor)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Lmdf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a tensor, replacing an existing entry of the same name in place.
    pub fn insert(&mut self, name: impl Into<String>, t: AnyTensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.insert(name, AnyTensor::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(AnyTensor::to_tensor)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    fn header_len(&self) -> usize {
        12 + self
            .entries
            .iter()
            .map(|(n, t)| 4 + n.len() + 2 + 4 * t.shape().len() + 8)
            .sum::<usize>()
    }

    /// Manifest with the payload offsets [`Lmdf::to_bytes`] would assign.
    pub fn manifest(&self) -> Vec<EntryInfo> {
        let mut offset = align_up(self.header_len());
        self.entries
            .iter()
            .map(|(name, t)| {
                let info = EntryInfo {
                    name: name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                };
                offset = align_up(offset + t.payload_len());
                info
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for info in &manifest {
            out.extend_from_slice(&(info.name.len() as u32).to_le_bytes());
            out.extend_from_slice(info.name.as_bytes());
            out.push(info.dtype.code());
            out.push(info.shape.len() as u8);
            for &d in &info.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&info.offset.to_le_bytes());
        }
        for (info, (_, t)) in manifest.iter().zip(&self.entries) {
            out.resize(info.offset as usize, 0);
            t.write_payload(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an LMDF file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported LMDF version {version}")));
        }
        let count = r.u32()? as usize;
        let mut infos = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code} for `{name}`")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            infos.push(EntryInfo {
                name,
                dtype,
                shape,
                offset,
            });
        }
        let mut out = Lmdf::new();
        for info in infos {
            let offset = usize::try_from(info.offset).map_err(|_| Error::Format("payload offset overflows".into()))?;
            if offset % ALIGN != 0 {
                return Err(Error::Format(format!("payload of `{}` is not 64-byte aligned", info.name)));
            }
            let numel: usize = info.shape.iter().product();
            let size = info.dtype.size();
            let payload = bytes
                .get(offset..offset + numel * size)
                .ok_or_else(|| Error::Format(format!("payload of `{}` is truncated", info.name)))?;
            let t = match info.dtype {
                DType::F32 => AnyTensor::F32(decode(&info.shape, payload)?),
                DType::F64 => AnyTensor::F64(decode(&info.shape, payload)?),
            };
            if out.get(&info.name).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", info.name)));
            }
            out.entries.push((info.name, t));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn decode<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("header is truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut f = Lmdf::new();
        f.push("a", &Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let bytes = f.to_bytes();
        // header: 12 + (4 + 1 + 2 + 4 + 8) = 31 -> payload at 64
        assert_eq!(&bytes[..4], b"LMDF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes[17], 0);
        assert_eq!(bytes[18], 1);
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[23..31].try_into().unwrap()), 64);
        assert!(bytes[31..64].iter().all(|&b| b == 0));
        assert_eq!(&bytes[64..68], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[68..72], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 72);
    }

    #[test]
    fn payloads_are_aligned() {
        let mut f = Lmdf::new();
        let mut rng = Rng::new(0);
        f.push("x", &rng.normal::<f64>(&[3, 5]));
        f.push("scalar", &Tensor::scalar(2.5f32));
        f.push("y", &rng.normal::<f32>(&[7]));
        for info in f.manifest() {
            assert_eq!(info.offset % 64, 0);
        }
        let back = Lmdf::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Lmdf::from_bytes(b"NOPE").is_err());
        let mut bytes = Lmdf::new().to_bytes();
        bytes[4] = 9;
        assert!(Lmdf::from_bytes(&bytes).is_err());
        let mut f = Lmdf::new();
        f.push("x", &Tensor::<f64>::zeros(&[4]));
        let bytes = f.to_bytes();
        assert!(Lmdf::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn save_load_save_is_byte_identical(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let mut f = Lmdf::new();
            for (i, s) in shapes.iter().enumerate() {
                if i % 2 == 0 {
                    f.push(format!("t{i}"), &rng.normal::<f32>(s));
                } else {
                    f.push(format!("t{i}"), &rng.normal::<f64>(s));
                }
            }
            let bytes = f.to_bytes();
            let again = Lmdf::from_bytes(&bytes).unwrap().to_bytes();
            prop_assert_eq!(bytes, again);
        }
    }
}
