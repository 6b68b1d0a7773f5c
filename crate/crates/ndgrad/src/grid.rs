use std::fmt;

use crate::error::{NdError, Result};
use crate::real::Real;

/// Shape of a [`Grid4`]: `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4(pub [usize; 4]);

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.c() * self.h() * self.w()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&d| d > 0)
    }
}

impl fmt::Debug for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-4 array stored row-major in `(n, c, h, w)` order.
#[derive(Clone, PartialEq)]
pub struct Grid4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Grid4<T> {
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(NdError::InvalidShape { shape });
        }
        if data.len() != shape.numel() {
            return Err(NdError::shape(
                "from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Grid4 { shape, data })
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        assert!(shape.is_valid(), "non-positive shape {shape}");
        Grid4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Grid4 {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    /// Column vector of length `len`, stored as `len x 1 x 1 x 1`.
    pub fn vector(values: Vec<T>) -> Result<Self> {
        let len = values.len();
        Self::from_vec(Shape4::new(len, 1, 1, 1), values)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape.0;
        ((n * s[1] + c) * s[2] + h) * s[3] + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Values of batch entry `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshaped(mut self, shape: Shape4) -> Result<Self> {
        if !shape.is_valid() || shape.numel() != self.numel() {
            return Err(NdError::shape(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Scalar value of a single-element grid.
    pub fn item(&self) -> Option<T> {
        (self.numel() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Grid4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grid4<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(parts: &[&Grid4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NdError::shape("stack", "no inputs".to_string()))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape.0;
            if s[1..] != [c, h, w] {
                return Err(NdError::shape(
                    "stack",
                    format!("{} vs {}", first.shape, p.shape),
                ));
            }
            n += s[0];
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(Shape4::new(n, c, h, w), data)
    }

    /// Element type conversion.
    pub fn cast<U: Real>(&self) -> Grid4<U> {
        Grid4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

impl<T: Real> fmt::Debug for Grid4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Grid4<{}>({}) [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
