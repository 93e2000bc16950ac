//! Dense vectors and matrices plus the numerically careful reductions the
//! loss and encoder are built on.
//!
//! Every reduction runs left to right in index order, so results are
//! bit-identical no matter how callers schedule the work.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix with eagerly validated shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    /// Builds a matrix from row-major values; rejects wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims("matrix value count", rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix values"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims("row length", cols, r.len()));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero; an empty-column matrix has no meaningful rows
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dims("matmul inner dimension", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dims("row dimension", self.cols, other.cols));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.set(i, j, dot(self.row(i), other.row(j)));
            }
        }
        Ok(out)
    }

    /// `self · v` for a column vector.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::dims("matvec input", self.cols, v.len()));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// True when every row has unit L2 norm within [`Scalar::unit_tolerance`].
    pub fn rows_are_unit(&self) -> bool {
        let tol = T::unit_tolerance();
        self.row_iter().all(|r| (norm(r) - T::one()).abs() <= tol)
    }

    /// Returns a copy with each row scaled to unit L2 norm.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let n = norm(self.row(i));
            if n < T::zero_norm_threshold() {
                return Err(Error::ZeroVector { norm: n.as_f64() });
            }
            for v in out.row_mut(i) {
                *v = *v / n;
            }
        }
        Ok(out)
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }

    /// Converts element type (e.g. `f64` → `f32`).
    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows {
            return Err(Error::dims("matrix rows", self.rows, other.rows));
        }
        if self.cols != other.cols {
            return Err(Error::dims("matrix cols", self.cols, other.cols));
        }
        Ok(())
    }
}

/// A dense embedding; `normalized` records whether it is known to be unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Wraps raw values as an unnormalized embedding.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding values"));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Wraps values claimed to be unit-norm; the claim is checked.
    pub fn unit(values: Vec<T>) -> Result<Self> {
        let v = Self::new(values)?;
        let n = norm(&v.values);
        if (n - T::one()).abs() > T::unit_tolerance() {
            return Err(Error::InvalidBatch(format!("vector flagged normalized has norm {n}")));
        }
        Ok(Self { normalized: true, ..v })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Scales `v` to unit L2 norm. Fails with [`Error::ZeroVector`] below the zero-norm threshold.
pub fn l2_normalize<T: Scalar>(v: &EmbeddingVector<T>) -> Result<EmbeddingVector<T>> {
    let n = v.norm();
    if n < T::zero_norm_threshold() {
        return Err(Error::ZeroVector { norm: n.as_f64() });
    }
    if v.normalized {
        return Ok(v.clone());
    }
    Ok(EmbeddingVector {
        values: v.values.iter().map(|&x| x / n).collect(),
        normalized: true,
    })
}

/// Pulls a gradient w.r.t. `u = y / ‖y‖` back to a gradient w.r.t. `y`:
/// `(g − u·(u·g)) / ‖y‖`.
pub fn normalize_backward<T: Scalar>(raw: &[T], grad_unit: &[T]) -> Result<Vec<T>> {
    if raw.len() != grad_unit.len() {
        return Err(Error::dims("normalize_backward", raw.len(), grad_unit.len()));
    }
    let n = norm(raw);
    if n < T::zero_norm_threshold() {
        return Err(Error::ZeroVector { norm: n.as_f64() });
    }
    let u: Vec<T> = raw.iter().map(|&x| x / n).collect();
    let ug = dot(&u, grad_unit);
    Ok(grad_unit.iter().zip(&u).map(|(&g, &ui)| (g - ui * ug) / n).collect())
}

/// Row-wise [`normalize_backward`] for a batch.
pub fn normalize_rows_backward<T: Scalar>(raw: &DenseMatrix<T>, grad_unit: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if raw.shape() != grad_unit.shape() {
        return Err(Error::ShapeMismatch(format!(
            "normalize_rows_backward: {:?} vs {:?}",
            raw.shape(),
            grad_unit.shape()
        )));
    }
    let mut out = DenseMatrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let g = normalize_backward(raw.row(i), grad_unit.row(i))?;
        out.row_mut(i).copy_from_slice(&g);
    }
    Ok(out)
}

/// Cosine similarity matrix `S[i][j] = ⟨Q_i, K_j⟩` for row-normalized inputs.
pub fn similarity_matrix<T: Scalar>(q: &DenseMatrix<T>, k: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    q.matmul_transposed(k)
}

/// `log Σ exp(xᵢ)` evaluated with a max shift.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> Result<T> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logsumexp input"));
    }
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let s = xs.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
    Ok(m + s.ln())
}
