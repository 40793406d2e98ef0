//! Scalar abstraction over the two supported precisions.
//!
//! Training defaults to f32; gradient checks run at f64 where central
//! finite differences are reliable.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type tag used in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

/// Floating-point element type for all tensors in this crate.
pub trait Scalar:
    Float
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + serde::Serialize
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + ndarray::ScalarOperand
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Append the little-endian byte representation of `vals` to `out`.
    fn write_le(vals: &[Self], out: &mut Vec<u8>);

    /// Decode a little-endian byte buffer produced by [`Scalar::write_le`].
    fn read_le(bytes: &[u8]) -> Result<Vec<Self>>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(vals: &[Self], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Result<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!(
                "f32 buffer length {} not a multiple of 4",
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(vals: &[Self], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Result<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!(
                "f64 buffer length {} not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| {
                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
            })
            .collect())
    }
}
