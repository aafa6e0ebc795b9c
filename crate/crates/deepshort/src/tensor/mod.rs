//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Everything that trains in this crate runs on the [`Tape`] recorded here.
//! The contract is strict determinism: every reduction (matmul contractions,
//! broadcast-gradient sums, batch means) runs in ascending index order, so a
//! fixed seed and thread count reproduce results bit for bit.

mod rng;
mod tape;

pub mod gradcheck;

pub use rng::{Rng, Stream};
pub use tape::{matmul_acc, transpose_into, Binding, Op, Param, ParamArena, ParamId, Tape, Var};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Element type for tensors: 32-bit for training, 64-bit for verification
/// paths (gradient checks, rank oracles).
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn read_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Element type tag used by the DSTN snapshot format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Row vector `[1 x n]`.
    pub fn row(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view of a rank-1 or rank-2 tensor; rank-1 is one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let (_, cols) = self.dims2();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {} elements into {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        // A single NaN poisons the sum; an Inf survives it. Overflow of the
        // sum itself only happens at magnitudes the norm guard rejects first.
        let mut acc = F::zero();
        for &x in &self.data {
            acc += x;
        }
        acc.is_finite()
    }

    /// Convert elements to another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize in the DSTN snapshot layout: magic "DSTN", u32 rank,
    /// u32 extents, u8 dtype tag (0=f32, 1=f64), little-endian elements
    /// row-major.
    pub fn write_dstn(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"DSTN");
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &extent in &self.shape {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        out.push(F::DTYPE as u8);
        for &x in &self.data {
            x.write_le(out);
        }
    }

    /// Deserialize a DSTN record, advancing `cursor` past it. The stored
    /// dtype must match `F`.
    pub fn read_dstn(bytes: &[u8], cursor: &mut usize) -> Result<Self> {
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            let start = *cursor;
            let end = start
                .checked_add(n)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| Error::Checkpoint("truncated DSTN record".into()))?;
            *cursor = end;
            Ok(&bytes[start..end])
        };
        if take(cursor, 4)? != b"DSTN" {
            return Err(Error::Checkpoint("bad DSTN magic".into()));
        }
        let rank = u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()) as usize);
        }
        let dtype = Dtype::from_tag(take(cursor, 1)?[0])?;
        if dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype mismatch: stored {dtype:?}, requested {:?}",
                F::DTYPE
            )));
        }
        let count: usize = shape.iter().product();
        let raw = take(cursor, count * dtype.size())?;
        let data = raw
            .chunks_exact(dtype.size())
            .map(F::read_le)
            .collect::<Vec<F>>();
        Ok(Tensor { shape, data })
    }

    pub fn save_dstn(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_dstn(&mut buf);
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_dstn(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cursor = 0;
        let tensor = Self::read_dstn(&bytes, &mut cursor)?;
        if cursor != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after DSTN record",
                bytes.len() - cursor
            )));
        }
        Ok(tensor)
    }
}
