//! Dense N,C,H,W tensors, numeric kernels and reverse-mode autodiff.

mod gradcheck;
mod graph;
pub mod kernels;
pub(crate) mod parallel;

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, random_tensor, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use kernels::{ConvGeometry, PoolGeometry, PoolMode};
pub use parallel::{par_map, Execution};

/// Element type of a tensor. `f32` is used for training and inference, `f64`
/// for finite-difference gradient checks.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Weight-file dtype code.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1, 1);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one (h, w) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub const fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        ((i * self.c + j) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array in N,C,H,W row-major layout.
///
/// Storage is reference counted, so clones are cheap and a tensor placed in a
/// [`Graph`] is never mutated in place. [`Tensor::data_mut`] copies on write
/// when the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape} needs {} elements, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::from_vec(shape, vec![value; shape.len()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(Shape::SCALAR, vec![value])
    }

    /// Builds a tensor by evaluating `f(i, j, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for i in 0..shape.n {
            for j in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self::from_vec(shape, data)
    }

    /// Vector of length `c` stored as shape (1, c, 1, 1).
    pub fn vector(values: Vec<T>) -> Self {
        let shape = Shape::new(1, values.len(), 1, 1);
        Self::from_vec(shape, values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.shape.offset(i, j, y, x)]
    }

    /// The (h, w) plane of sample `i`, channel `j`.
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (i * self.shape.c + j) * p;
        &self.data[start..start + p]
    }

    /// Reinterprets the buffer with a new shape of equal length.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.shape,
            self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::cast(self.len() as f64)
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Equality of shape and of every element's bit pattern.
    pub fn bits_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Single-sample slice along the batch axis.
    pub fn sample(&self, i: usize) -> Self {
        let s = self.shape;
        let per = s.c * s.plane();
        Self::from_vec(
            Shape::new(1, s.c, s.h, s.w),
            self.data[i * per..(i + 1) * per].to_vec(),
        )
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::dim("stack", format!("{s} vs {first}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_vec(Shape::new(n, first.c, first.h, first.w), data))
    }

    /// Splits along the channel axis into pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        let s = self.shape;
        if widths.iter().sum::<usize>() != s.c {
            return Err(Error::dim(
                "split_channels",
                format!("widths {widths:?} do not sum to {} channels", s.c),
            ));
        }
        let p = s.plane();
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &cw in widths {
            let mut data = Vec::with_capacity(s.n * cw * p);
            for i in 0..s.n {
                let base = (i * s.c + start) * p;
                data.extend_from_slice(&self.data[base..base + cw * p]);
            }
            out.push(Self::from_vec(Shape::new(s.n, cw, s.h, s.w), data));
            start += cw;
        }
        Ok(out)
    }

    /// Text dump: a `shape n c h w` line, then one line of `w` values per image row.
    pub fn to_text(&self) -> String {
        let s = self.shape;
        let mut out = format!("shape {} {} {} {}\n", s.n, s.c, s.h, s.w);
        for row in self.data.chunks(s.w.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::dim("from_text", m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty input"))?;
        let dims: Vec<usize> = header
            .strip_prefix("shape ")
            .ok_or_else(|| bad("missing `shape` header"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad dimension")))
            .collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(bad("shape needs four dimensions"));
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let data = lines
            .flat_map(str::split_whitespace)
            .map(|t| {
                t.parse::<f64>()
                    .map(T::cast)
                    .map_err(|_| bad("bad value"))
            })
            .collect::<Result<Vec<T>>>()?;
        Tensor::new(shape, data)
    }
}
