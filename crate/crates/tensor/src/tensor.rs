use std::fmt;

use crate::Scalar;

/// Logical shape of a rank-5 tensor: `[batch, channels, x, y, z]`.
///
/// Storage is x-fastest inside each `(batch, channel)` plane, i.e. the flat
/// index of `(n, c, x, y, z)` is `x + X*(y + Y*(z + Z*(c + C*n)))`. The same
/// convention is used for convolution kernels with `batch = out channels`
/// and `channels = in channels`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Shape5 {
    pub const fn new(n: usize, c: usize, x: usize, y: usize, z: usize) -> Self {
        Shape5 { n, c, x, y, z }
    }

    pub const fn spatial(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn with_spatial(&self, s: [usize; 3]) -> Self {
        Shape5 { x: s[0], y: s[1], z: s[2], ..*self }
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Shape5 { c, ..*self }
    }

    /// Voxels in one channel plane.
    pub const fn plane(&self) -> usize {
        self.x * self.y * self.z
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.plane()
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        x + self.x * (y + self.y * (z + self.z * (c + self.c * n)))
    }
}

impl fmt::Debug for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.x, self.y, self.z)
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-5 tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn full(shape: Shape5, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data length does not match shape {shape}");
        Tensor { shape, data }
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor { shape, data: (0..shape.len()).map(&mut f).collect() }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.shape.index(n, c, x, y, z)]
    }

    /// One `(batch, channel)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Concatenates batch items that share `(c, x, y, z)`.
    pub fn stack_batch(items: &[Tensor<T>]) -> Tensor<T> {
        assert!(!items.is_empty(), "stack_batch needs at least one tensor");
        let first = items[0].shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            assert_eq!(t.shape, Shape5 { n: 1, ..first }, "stack_batch expects matching single-item tensors");
            data.extend_from_slice(&t.data);
        }
        Tensor { shape: Shape5 { n: items.len(), ..first }, data }
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
