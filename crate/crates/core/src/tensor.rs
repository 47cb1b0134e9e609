//! Dense NCHW tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `[batch, channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "[{n}, {c}, {h}, {w}]")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape.0;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous `h*w` slice for one (item, channel).
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch item.
    #[inline]
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c() * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c() * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("expected {shape}, found {}", self.shape)));
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Extracts batch items `[start, start+count)`.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Self {
        let len = self.shape.c() * self.shape.plane();
        let [_, c, h, w] = self.shape.0;
        Tensor {
            shape: Shape::new(count, c, h, w),
            data: self.data[start * len..(start + count) * len].to_vec(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::Shape(format!("cannot stack {} with {}", t.shape, first.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(n, c, h, w), data })
    }

    /// Selects channels `[start, start+count)`.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Self {
        let [n, _, h, w] = self.shape.0;
        let mut out = Tensor::zeros(Shape::new(n, count, h, w));
        for i in 0..n {
            for c in 0..count {
                out.plane_mut(i, c).copy_from_slice(self.plane(i, start + c));
            }
        }
        out
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [n, ca, h, w] = a.shape.0;
        let [nb, cb, hb, wb] = b.shape.0;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("cannot concatenate {} and {}", a.shape, b.shape)));
        }
        let mut out = Tensor::zeros(Shape::new(n, ca + cb, h, w));
        for i in 0..n {
            let dst = out.item_mut(i);
            let la = ca * h * w;
            dst[..la].copy_from_slice(a.item(i));
            dst[la..].copy_from_slice(b.item(i));
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}
