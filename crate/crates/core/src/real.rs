use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element dtype tag, used by checkpoints and precision dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    R32,
    R64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::R32 => 0,
            Dtype::R64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::R32),
            1 => Some(Dtype::R64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::R32 => 4,
            Dtype::R64 => 8,
        }
    }
}

/// Scalar element type for tensors. Training runs at f32, verification at f64.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::R32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::R64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shorthand for lifting literals into a generic scalar type.
#[inline]
pub fn lit<F: Real>(v: f64) -> F {
    F::from_f64(v)
}
