use std::fmt;

use super::{NnError, Real};

/// Dimensions of a [`Tensor4`]: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_batch(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major N×C×H×W array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    /// Wraps `data`, rejecting a length mismatch or any non-finite value.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != dims.len() {
            return Err(NnError::Shape(format!(
                "tensor {dims} needs {} elements, got {}",
                dims.len(),
                data.len()
            )));
        }
        let t = Self { dims, data };
        t.check_finite("tensor input")?;
        Ok(t)
    }

    /// Wraps `data` without the finiteness scan. Length is still checked.
    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.len(), "tensor {dims} length mismatch");
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous slice holding batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.dims.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies batch item `n` into a standalone batch-of-one tensor.
    pub fn item_tensor(&self, n: usize) -> Self {
        Self::from_raw(self.dims.with_batch(1), self.item(n).to_vec())
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack<'a, I>(parts: I) -> Result<Self, NnError>
    where
        I: IntoIterator<Item = &'a Self>,
    {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| NnError::Shape("cannot stack an empty list".into()))?;
        let mut dims = first.dims;
        let mut data = first.data.clone();
        for t in iter {
            if (t.dims.c, t.dims.h, t.dims.w) != (dims.c, dims.h, dims.w) {
                return Err(NnError::Shape(format!(
                    "cannot stack {} onto {}",
                    t.dims, dims
                )));
            }
            dims.n += t.dims.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_raw(dims, data))
    }

    /// Reinterprets the layout; element count must be preserved.
    pub fn reshape(self, dims: Dims) -> Result<Self, NnError> {
        if dims.len() != self.dims.len() {
            return Err(NnError::Shape(format!(
                "cannot reshape {} into {dims}",
                self.dims
            )));
        }
        Ok(Self::from_raw(dims, self.data))
    }

    pub fn check_finite(&self, what: &str) -> Result<(), NnError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(NnError::NonFinite(format!("{what} at flat index {i}"))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4::from_raw(self.dims, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }
}
