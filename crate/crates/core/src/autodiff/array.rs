//! Dense row-major real arrays and the numeric kernels the tape is built on.
//!
//! Everything the model touches is at most two-dimensional: a batch of rows
//! (one per Monte Carlo sample) by a feature width. Scalars are `1 x 1`.

use std::fmt;

/// A dense 2-D array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Array {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "array data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    /// A single row.
    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    /// A single column.
    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(n, n);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
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
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 x 1` array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        debug_assert_eq!(self.shape(), other.shape());
        Array::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Array {
        let mut out = Array::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Repeats a single row `n` times.
    pub fn repeat_rows(&self, n: usize) -> Array {
        assert_eq!(self.rows, 1, "repeat_rows expects a single row");
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Array::from_vec(n, self.cols, data)
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&self, start: usize, len: usize) -> Array {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            let base = r * self.cols + start;
            data.extend_from_slice(&self.data[base..base + len]);
        }
        Array::from_vec(self.rows, len, data)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Array {
        assert!(start + len <= self.rows, "row slice out of range");
        Array::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}

/// `a (r x k) * b (k x c)`.
pub fn matmul(a: &Array, b: &Array) -> Array {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let (r, k, c) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::from_vec(r, c, out)
}

/// `a^T (k x r)^T * b (r x c)`, i.e. `a` is `r x k`.
pub fn matmul_tn(a: &Array, b: &Array) -> Array {
    assert_eq!(a.rows, b.rows, "matmul_tn row mismatch");
    let (r, k, c) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::from_vec(k, c, out)
}

/// `a (r x c) * b^T` where `b` is `k x c`.
pub fn matmul_nt(a: &Array, b: &Array) -> Array {
    assert_eq!(a.cols, b.cols, "matmul_nt column mismatch");
    let (r, c, k) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let arow = &a.data[i * c..(i + 1) * c];
        for j in 0..k {
            let brow = &b.data[j * c..(j + 1) * c];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Array::from_vec(r, k, out)
}

/// `x * w + b` with `b` a single row broadcast over the rows of `x`.
pub fn affine(x: &Array, w: &Array, b: &Array) -> Array {
    let mut out = matmul(x, w);
    let c = out.cols;
    for row in out.data.chunks_mut(c) {
        for (o, bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// LU factorisation with partial pivoting of a square matrix stored row-major
/// in `a` (overwritten). Returns the permutation and sign, or `None` when the
/// matrix is singular to working precision.
fn lu_in_place(a: &mut [f64], n: usize) -> Option<(Vec<usize>, f64)> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            a[i * n + k] = f;
            for j in k + 1..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    Some((perm, sign))
}

/// `ln |det m|` for a square row-major matrix.
pub fn log_abs_det(m: &[f64], n: usize) -> Option<f64> {
    let mut a = m.to_vec();
    lu_in_place(&mut a, n)?;
    Some((0..n).map(|i| a[i * n + i].abs().ln()).sum())
}

/// Inverse of a square row-major matrix.
pub fn inverse(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let (perm, _) = lu_in_place(&mut a, n)?;
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        // Solve L U x = P e_col.
        let mut x: Vec<f64> = (0..n).map(|i| if perm[i] == col { 1.0 } else { 0.0 }).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= a[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= a[i * n + j] * x[j];
            }
            x[i] /= a[i * n + i];
        }
        for i in 0..n {
            inv[i * n + col] = x[i];
        }
    }
    Some(inv)
}
