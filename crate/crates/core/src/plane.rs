/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Plane {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "plane data length");
        Plane { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Plane { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `size_r x size_c` window starting at `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, size_r: usize, size_c: usize) -> Plane<T> {
        assert!(r0 + size_r <= self.rows && c0 + size_c <= self.cols, "crop out of bounds");
        let mut data = Vec::with_capacity(size_r * size_c);
        for r in r0..r0 + size_r {
            data.extend_from_slice(&self.row(r)[c0..c0 + size_c]);
        }
        Plane {
            rows: size_r,
            cols: size_c,
            data,
        }
    }

    /// Write `src` into this plane with its top-left corner at `(r0, c0)`.
    pub fn paste(&mut self, src: &Plane<T>, r0: usize, c0: usize) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "paste out of bounds");
        for r in 0..src.rows {
            let start = (r0 + r) * self.cols + c0;
            self.data[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }
}
