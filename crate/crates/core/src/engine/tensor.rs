use std::fmt;

use super::EngineError;

/// Dense row-major `f32` array.
///
/// Most of the engine treats tensors as matrices; vectors are stored as
/// `1 x n` rows and scalars as `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, EngineError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(EngineError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EngineError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Matrix constructor; panics on inconsistent sizes, so only use it where
    /// the caller already controls both.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix {rows}x{cols} from {} values",
            data.len()
        );
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f32) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f32) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn row_vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Leading dimension; for matrices, the row count.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, out)
    }

    /// Index of the largest entry of each row; ties go to the smaller index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// `A (m x k) * B (k x n)` with `f64` accumulation of every inner product.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
}

/// Computes `A^T * B` for `A: m x k`, `B: m x n`.
pub(crate) fn matmul_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let dst = &mut acc[p * n..(p + 1) * n];
            for (s, &bv) in dst.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Computes `A * B^T` for `A: m x k`, `B: n x k`.
pub(crate) fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            out[i * n + j] = s as f32;
        }
    }
    out
}
