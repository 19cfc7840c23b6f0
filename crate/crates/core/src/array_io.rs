//! Little-endian binary array container shared by datasets, flows and
//! checkpoints.
//!
//! Layout of one record:
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"DPA1"
//! 4       1         dtype  0 = f32, 1 = f64, 2 = u32, 3 = i64
//! 5       1         ndim
//! 6       2         reserved (zero)
//! 8       8 * ndim  dims, u64 little-endian, outermost first
//! ..      n * size  raw row-major data, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const ARRAY_MAGIC: [u8; 4] = *b"DPA1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U32(_) => 2,
            ArrayData::I64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> std::result::Result<Self, String> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(format!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> std::result::Result<Self, String> {
        Self::new(shape, ArrayData::F32(data))
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => ArrayData::F32(flat.to_vec1()?),
            DType::F64 => ArrayData::F64(flat.to_vec1()?),
            DType::U32 => ArrayData::U32(flat.to_vec1()?),
            DType::I64 => ArrayData::I64(flat.to_vec1()?),
            other => {
                return Err(Error::Shape(format!("unsupported tensor dtype {other:?}")));
            }
        };
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = match &self.data {
            ArrayData::F32(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            ArrayData::F64(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            ArrayData::U32(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            ArrayData::I64(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
        };
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&ARRAY_MAGIC)?;
        w.write_all(&[self.data.code(), self.shape.len() as u8, 0, 0])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)
    }

    /// Reads one record. Format problems come back as `InvalidData`.
    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if head[..4] != ARRAY_MAGIC {
            return Err(bad(format!("bad magic {:?}", &head[..4])));
        }
        let (code, ndim) = (head[4], head[5] as usize);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let width = match code {
            0 | 2 => 4,
            1 | 3 => 8,
            c => return Err(bad(format!("unknown dtype code {c}"))),
        };
        let mut raw = vec![0u8; n * width];
        r.read_exact(&mut raw)?;
        let data = match code {
            0 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => ArrayData::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => ArrayData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}

pub fn save_array(path: &Path, array: &Array) -> Result<()> {
    std::fs::write(path, array.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_array(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_array(path, &bytes)
}

pub(crate) fn parse_array(path: &Path, bytes: &[u8]) -> Result<Array> {
    let mut cursor = bytes;
    let a = Array::read_from(&mut cursor).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if !cursor.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", cursor.len()),
        });
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = Array::f32(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..4], b"DPA1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[28..32].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 8 + 16 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let a = Array::new(vec![3], ArrayData::U32(vec![1, 2, 3])).unwrap();
        let mut b = a.to_bytes();
        assert!(parse_array(Path::new("x"), &b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(parse_array(Path::new("x"), &b), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let f: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin()).collect();
            let a = Array::new(dims.clone(), ArrayData::F64(f)).unwrap();
            let back = parse_array(Path::new("mem"), &a.to_bytes()).unwrap();
            prop_assert_eq!(a, back);
            let i: Vec<i64> = (0..n).map(|i| i as i64 - seed as i64 / 3).collect();
            let a = Array::new(dims, ArrayData::I64(i)).unwrap();
            prop_assert_eq!(a.clone(), parse_array(Path::new("mem"), &a.to_bytes()).unwrap());
        }
    }
}
