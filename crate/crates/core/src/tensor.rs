//! Dense row-major tensors and the `BEVT` on-disk container.
//!
//! Layout of a `BEVT` file (all integers little-endian):
//!
//! | offset | size     | field                                  |
//! |--------|----------|----------------------------------------|
//! | 0      | 4        | magic `BEVT`                           |
//! | 4      | 1        | version, currently `0x01`              |
//! | 5      | 1        | dtype (`0x01` = f32, `0x02` = f64)     |
//! | 6      | 1        | rank                                   |
//! | 7      | 1        | pad, zero                              |
//! | 8      | 4        | reserved, zero                         |
//! | 12     | 8 × rank | dims as u64                            |
//! | ...    |          | row-major payload                      |

use std::fmt::Debug;
use std::fs;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BEVT";
pub const VERSION: u8 = 0x01;
/// Fixed part of the header, before the dims.
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0x01,
            Dtype::F64 => 0x02,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0x01 => Ok(Dtype::F32),
            0x02 => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::InvalidArgument(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Copy
    + Default
    + PartialEq
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn extend_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Dense row-major tensor. Rank is at least 1 and every extent at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::Shape("tensor rank must be at least 1".into()));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {} exceeds 255", dims.len())));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("dim {pos} is zero in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![T::default(); len],
        })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(dims, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a multi-index. Panics when out of bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff<U: Element>(&self, other: &Tensor<U>) -> f64 {
        assert_eq!(self.dims, other.dims, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// A tensor read from disk whose dtype is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_typed<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let width = T::DTYPE.width();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.rank() + width * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    out.push(0);
    out.extend_from_slice(&[0u8; 4]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.extend_le(&mut out);
    }
    out
}

fn decode_payload<T: Element>(dims: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload
        .chunks_exact(T::DTYPE.width())
        .map(T::from_le)
        .collect();
    Tensor::new(dims, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(Error::MalformedHeader("rank is zero".into()));
    }
    if bytes[7] != 0 || bytes[8..12] != [0; 4] {
        return Err(Error::MalformedHeader(
            "pad/reserved bytes must be zero".into(),
        ));
    }
    let dims_end = HEADER_LEN + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Truncated {
            expected: dims_end,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = check_dims(&dims)?;
    let expected = count
        .checked_mul(dtype.width())
        .and_then(|n| n.checked_add(dims_end))
        .ok_or_else(|| Error::MalformedHeader(format!("dims {dims:?} too large")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[dims_end..];
    Ok(match dtype {
        Dtype::F32 => AnyTensor::F32(decode_payload(dims, payload)?),
        Dtype::F64 => AnyTensor::F64(decode_payload(dims, payload)?),
    })
}

pub fn write_tensor<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_f32_file_is_24_bytes() {
        let t = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"BEVT");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 0x01);
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 0);
    }

    #[test]
    fn dims_are_little_endian_u64() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes[5], 0x02);
        assert_eq!(&bytes[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..28], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 16 + 48);
    }

    #[test]
    fn rejects_bad_magic() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_short_payload() {
        let t = Tensor::<f32>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_tensor(&t);
        let err = decode_tensor(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn rejects_other_version_and_dtype() {
        let t = Tensor::<f32>::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[4] = 2;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));
        bytes[4] = 1;
        bytes[5] = 7;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::UnsupportedDtype(7))
        ));
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bevt");
        let t = Tensor::<f64>::new(vec![2, 1, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), AnyTensor::F64(t));
        let missing = dir.path().join("missing.bevt");
        assert!(matches!(read_tensor(&missing), Err(Error::Io { .. })));
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=5)
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 100, rng_seed: proptest::test_runner::RngSeed::Fixed(0xBE57), ..ProptestConfig::default() })]

        #[test]
        fn round_trip_f32_is_bit_exact(dims in dims_strategy(), seed in any::<u64>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = (0..len)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)))
                .collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let bytes = encode_tensor(&t);
            prop_assert_eq!(bytes.len(), HEADER_LEN + 8 * dims.len() + 4 * len);
            let AnyTensor::F32(back) = decode_tensor(&bytes).unwrap() else { panic!("dtype") };
            prop_assert_eq!(back.dims(), t.dims());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn round_trip_f64_is_bit_exact(dims in dims_strategy(), values in prop::collection::vec(any::<f64>(), 625)) {
            let len: usize = dims.iter().product();
            let t = Tensor::new(dims, values[..len].to_vec()).unwrap();
            let AnyTensor::F64(back) = decode_tensor(&encode_tensor(&t)).unwrap() else { panic!("dtype") };
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
