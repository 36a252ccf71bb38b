//! Shapes, element types and host-side data vectors.

use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

use crate::error::ShapeError;

/// Largest element count a single tensor may hold.
pub const MAX_ELEMENTS: usize = 1 << 31;

/// Dense row-major shape. Rank is at least one and every dimension is positive.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, ShapeError> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(ShapeError::EmptyRank);
        }
        let mut count: usize = 1;
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(ShapeError::ZeroDim { axis });
            }
            count = count
                .checked_mul(d)
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or(ShapeError::TooLarge)?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn num_elements(&self) -> usize {
        self.0.iter().product()
    }

    /// Leading dimension and the product of the remaining ones.
    pub fn flat2(&self) -> (usize, usize) {
        let rest = self.0[1..].iter().product();
        (self.0[0], rest)
    }

    pub fn bytes(&self, etype: ElemType) -> usize {
        self.num_elements() * etype.width()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ElemType {
    #[default]
    F32,
    F64,
}

impl ElemType {
    pub fn width(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElemType::F32 => "float32",
            ElemType::F64 => "float64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float32" | "f32" => Some(ElemType::F32),
            "float64" | "f64" => Some(ElemType::F64),
            _ => None,
        }
    }
}

/// Owned host data of one of the supported element types.
#[derive(Clone, Debug, PartialEq)]
pub enum DataVec {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl DataVec {
    pub fn zeros(etype: ElemType, len: usize) -> Self {
        match etype {
            ElemType::F32 => DataVec::F32(alloc::vec![0.0; len]),
            ElemType::F64 => DataVec::F64(alloc::vec![0.0; len]),
        }
    }

    pub fn from_f64(etype: ElemType, values: &[f64]) -> Self {
        match etype {
            ElemType::F32 => DataVec::F32(values.iter().map(|&v| v as f32).collect()),
            ElemType::F64 => DataVec::F64(values.to_vec()),
        }
    }

    pub fn etype(&self) -> ElemType {
        match self {
            DataVec::F32(_) => ElemType::F32,
            DataVec::F64(_) => ElemType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DataVec::F32(v) => v.len(),
            DataVec::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lossless widening to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            DataVec::F32(v) => v.iter().map(|&x| x as f64).collect(),
            DataVec::F64(v) => v.clone(),
        }
    }

    /// Copies the first `min(len)` elements of `src`; types must agree.
    pub fn copy_prefix_from(&mut self, src: &DataVec) -> bool {
        match (self, src) {
            (DataVec::F32(d), DataVec::F32(s)) => {
                let n = d.len().min(s.len());
                d[..n].copy_from_slice(&s[..n]);
                true
            }
            (DataVec::F64(d), DataVec::F64(s)) => {
                let n = d.len().min(s.len());
                d[..n].copy_from_slice(&s[..n]);
                true
            }
            _ => false,
        }
    }

    /// Little-endian IEEE-754 encoding, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.etype().width());
        match self {
            DataVec::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            DataVec::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_le_bytes(etype: ElemType, bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(etype.width()) {
            return None;
        }
        Some(match etype {
            ElemType::F32 => DataVec::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            ElemType::F64 => DataVec::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        })
    }
}

/// Scalar types kernels are instantiated for.
pub trait Element: Float + Default + fmt::Debug + Send + Sync + 'static {
    const ETYPE: ElemType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn slice(data: &DataVec) -> Option<&[Self]>;
    fn slice_mut(data: &mut DataVec) -> Option<&mut [Self]>;
}

impl Element for f32 {
    const ETYPE: ElemType = ElemType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn slice(data: &DataVec) -> Option<&[Self]> {
        match data {
            DataVec::F32(v) => Some(v),
            _ => None,
        }
    }
    fn slice_mut(data: &mut DataVec) -> Option<&mut [Self]> {
        match data {
            DataVec::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Element for f64 {
    const ETYPE: ElemType = ElemType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn slice(data: &DataVec) -> Option<&[Self]> {
        match data {
            DataVec::F64(v) => Some(v),
            _ => None,
        }
    }
    fn slice_mut(data: &mut DataVec) -> Option<&mut [Self]> {
        match data {
            DataVec::F64(v) => Some(v),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(Shape::new(alloc::vec![]), Err(ShapeError::EmptyRank));
        assert_eq!(Shape::new([2, 0]), Err(ShapeError::ZeroDim { axis: 1 }));
        assert_eq!(Shape::new([1 << 16, 1 << 16]), Err(ShapeError::TooLarge));
        assert!(Shape::new([1 << 15, 1 << 16]).is_ok());
    }

    #[test]
    fn flat2_collapses_trailing_dims() {
        let s = Shape::new([4, 3, 5]).unwrap();
        assert_eq!(s.flat2(), (4, 15));
        assert_eq!(s.num_elements(), 60);
        assert_eq!(s.bytes(ElemType::F64), 480);
    }

    #[test]
    fn le_bytes_round_trip() {
        let d = DataVec::F32(alloc::vec![1.0, -2.5, f32::INFINITY]);
        let b = d.to_le_bytes();
        assert_eq!(&b[..4], &1.0f32.to_le_bytes());
        assert_eq!(DataVec::from_le_bytes(ElemType::F32, &b), Some(d));
        assert_eq!(DataVec::from_le_bytes(ElemType::F64, &b[..5]), None);
    }
}
