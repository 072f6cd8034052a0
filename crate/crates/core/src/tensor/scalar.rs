use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type tag shared by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U64 = 3,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }
}

/// Floating point element of a [`Tensor`](super::Tensor).
///
/// `f64` is used for gradient checking, `f32` for training.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
