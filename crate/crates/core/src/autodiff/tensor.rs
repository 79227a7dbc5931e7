use serde::{Deserialize, Serialize};

use super::TensorError;
use crate::Real;

/// Dense row-major matrix.
///
/// Rows index samples (pixels) and columns index features everywhere in the
/// crate, so a batch of `K` pixels with `w` channels is a `K × w` tensor and a
/// bias vector is a `1 × w` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2D<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::DataLength {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn scalar(v: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 × 1` tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.shape() != (1, 1) {
            return Err(TensorError::NotScalar(self.rows, self.cols));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        // Branch-free so the scan vectorizes.
        self.data.chunks(256).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor2D<U> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// `self × rhs`, each entry accumulated over the inner index in order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let n = rhs.cols;
        let mut out = Self::zeros(self.rows, n);
        let mut j0 = 0;
        while j0 < n {
            let nb = (n - j0).min(8);
            match nb {
                5.. => gemm_block::<T, 8>(self, rhs, j0, nb, &mut out),
                2..=4 => gemm_block::<T, 4>(self, rhs, j0, nb, &mut out),
                _ => gemm_block::<T, 1>(self, rhs, j0, nb, &mut out),
            }
            j0 += nb;
        }
        Ok(out)
    }

    /// `self × rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.cols != rhs.cols {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        self.matmul(&rhs.transpose())
    }

    /// `selfᵀ × rhs`, accumulated over rows in order.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.rows != rhs.rows {
            return Err(TensorError::Shape {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (m, n) = (self.cols, rhs.cols);
        let mut out = Self::zeros(m, n);
        let mut j0 = 0;
        while j0 < n {
            let nb = (n - j0).min(8);
            match nb {
                5.. => tn_block::<T, 8>(self, rhs, j0, nb, &mut out),
                2..=4 => tn_block::<T, 4>(self, rhs, j0, nb, &mut out),
                _ => tn_block::<T, 1>(self, rhs, j0, nb, &mut out),
            }
            j0 += nb;
        }
        Ok(out)
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        out
    }
}

const GEMM_ROWS: usize = 4;

/// Output columns `j0..j0 + nb` of `a × b`, computed in `GEMM_ROWS × C`
/// register tiles against a zero-padded copy of those columns of `b`.
/// Larger tiles defeat LLVM's register promotion of `acc`.
fn gemm_block<T: Real, const C: usize>(a: &Tensor2D<T>, b: &Tensor2D<T>, j0: usize, nb: usize, out: &mut Tensor2D<T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut packed = vec![[T::zero(); C]; k];
    for (kk, row) in packed.iter_mut().enumerate() {
        row[..nb].copy_from_slice(&b.data[kk * n + j0..kk * n + j0 + nb]);
    }
    let full = m - m % GEMM_ROWS;
    for i0 in (0..full).step_by(GEMM_ROWS) {
        let mut acc = [[T::zero(); C]; GEMM_ROWS];
        let rows: [&[T]; GEMM_ROWS] = std::array::from_fn(|q| &a.data[(i0 + q) * k..(i0 + q + 1) * k]);
        for (kk, brow) in packed.iter().enumerate() {
            for q in 0..GEMM_ROWS {
                let x = rows[q][kk];
                for l in 0..C {
                    acc[q][l] = x.mul_add(brow[l], acc[q][l]);
                }
            }
        }
        for (q, row) in acc.iter().enumerate() {
            out.data[(i0 + q) * n + j0..(i0 + q) * n + j0 + nb].copy_from_slice(&row[..nb]);
        }
    }
    for i in full..m {
        let mut acc = [T::zero(); C];
        for (kk, brow) in packed.iter().enumerate() {
            let x = a.data[i * k + kk];
            for l in 0..C {
                acc[l] = x.mul_add(brow[l], acc[l]);
            }
        }
        out.data[i * n + j0..i * n + j0 + nb].copy_from_slice(&acc[..nb]);
    }
}

/// Columns `j0..j0 + nb` of `aᵀ × b`, accumulated over the rows of `a` and
/// `b` in order, `GEMM_ROWS × C` outputs at a time.
fn tn_block<T: Real, const C: usize>(a: &Tensor2D<T>, b: &Tensor2D<T>, j0: usize, nb: usize, out: &mut Tensor2D<T>) {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut packed = vec![[T::zero(); C]; k];
    for (r, row) in packed.iter_mut().enumerate() {
        row[..nb].copy_from_slice(&b.data[r * n + j0..r * n + j0 + nb]);
    }
    let full = m - m % GEMM_ROWS;
    for i0 in (0..full).step_by(GEMM_ROWS) {
        let mut acc = [[T::zero(); C]; GEMM_ROWS];
        for (r, brow) in packed.iter().enumerate() {
            let x: &[T; GEMM_ROWS] = a.data[r * m + i0..r * m + i0 + GEMM_ROWS].try_into().expect("tile");
            for q in 0..GEMM_ROWS {
                for l in 0..C {
                    acc[q][l] = x[q].mul_add(brow[l], acc[q][l]);
                }
            }
        }
        for (q, row) in acc.iter().enumerate() {
            out.data[(i0 + q) * n + j0..(i0 + q) * n + j0 + nb].copy_from_slice(&row[..nb]);
        }
    }
    for i in full..m {
        let mut acc = [T::zero(); C];
        for (r, brow) in packed.iter().enumerate() {
            let x = a.data[r * m + i];
            for l in 0..C {
                acc[l] = x.mul_add(brow[l], acc[l]);
            }
        }
        out.data[i * n + j0..i * n + j0 + nb].copy_from_slice(&acc[..nb]);
    }
}
