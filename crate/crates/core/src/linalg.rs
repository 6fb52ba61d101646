//! Dense row-major matrices, truncated SVD and deterministic percentile
//! thresholds.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

/// Sweep cap for the one-sided Jacobi SVD.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal tolerance: a column pair counts as orthogonal once
/// `|a_p·a_q| <= tol·|a_p|·|a_q|`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;

/// Dense `f64` matrix stored row-major. Every entry is finite.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::new(n, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix from `f(row, col)`. Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                assert!(v.is_finite(), "non-finite entry at ({r}, {c})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(v.is_finite(), "non-finite entry at ({r}, {c})");
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "transpose_matmul",
                format!(
                    "({}x{})ᵀ times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = vec![0.0; self.cols * other.cols];
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.cols, other.cols, out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, col| self.get(r, col) * c)
    }

    /// `self -= c · other`, in place.
    pub fn sub_scaled_assign(&mut self, other: &Matrix, c: f64) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                "sub_scaled_assign",
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        let updated: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - c * b)
            .collect();
        if updated.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("update produced a non-finite entry".into()));
        }
        self.data = updated;
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }
}

/// Rank-`r` truncation of a singular value decomposition.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix,
    /// Length `r`, non-negative, non-increasing.
    pub sigma: Vec<f64>,
    /// `r × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = self.u_sigma();
        us.matmul(&self.vt).expect("svd factors have matching shapes")
    }

    /// `U · diag(σ)`, i.e. the columns of `U` scaled by their singular values.
    pub fn u_sigma(&self) -> Matrix {
        Matrix::from_fn(self.u.rows(), self.rank(), |r, c| {
            self.u.get(r, c) * self.sigma[c]
        })
    }
}

/// Best rank-`r` approximation of `w` (Frobenius norm) via one-sided Jacobi.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<TruncatedSvd> {
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::Parameter(format!(
            "svd rank {r} outside 1..={k} for a {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    let full = thin_svd(w)?;
    let u = Matrix::from_fn(w.rows(), r, |i, j| full.u.get(i, j));
    let vt = Matrix::from_fn(r, w.cols(), |i, j| full.vt.get(i, j));
    Ok(TruncatedSvd {
        u,
        sigma: full.sigma[..r].to_vec(),
        vt,
    })
}

/// Thin SVD with `min(rows, cols)` singular triplets.
fn thin_svd(w: &Matrix) -> Result<TruncatedSvd> {
    if w.rows() >= w.cols() {
        let (u_cols, sigma, v_cols) = jacobi_columns(w)?;
        let u = columns_to_matrix(w.rows(), &u_cols);
        let vt = columns_to_matrix(w.cols(), &v_cols).transpose();
        Ok(TruncatedSvd { u, sigma, vt })
    } else {
        // wᵀ = U' Σ V'ᵀ  =>  w = V' Σ U'ᵀ
        let (u_cols, sigma, v_cols) = jacobi_columns(&w.transpose())?;
        let u = columns_to_matrix(w.rows(), &v_cols);
        let vt = columns_to_matrix(w.cols(), &u_cols).transpose();
        Ok(TruncatedSvd { u, sigma, vt })
    }
}

fn columns_to_matrix(rows: usize, cols: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type Columns = Vec<Vec<f64>>;

/// One-sided (Hestenes) Jacobi on a tall matrix (`rows >= cols`). Returns the
/// left singular vectors, singular values and right singular vectors as
/// column lists, sorted by descending singular value.
fn jacobi_columns(a: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (m, n) = a.dims();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "jacobi svd did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let sigma_max = order.first().map_or(0.0, |&i| sigma[i]);
    let cutoff = sigma_max * (m as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        if sigma[i] > cutoff && sigma[i] > 0.0 {
            u_cols.push(cols[i].iter().map(|x| x / sigma[i]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing);

    let sorted_sigma = order.iter().map(|&i| sigma[i]).collect();
    let sorted_v = order.iter().map(|&i| std::mem::take(&mut v[i])).collect();
    Ok((u_cols, sorted_sigma, sorted_v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `missing` columns with unit vectors orthogonal to every other
/// column, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    let m = cols.first().map_or(0, Vec::len);
    let mut basis = 0;
    for &slot in missing {
        while basis < m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot || (missing.contains(&j) && col.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&cand, col);
                    for (c, x) in cand.iter_mut().zip(col) {
                        *c -= proj * x;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                cols[slot] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Percentile cut point over `(magnitude, index)` keys.
///
/// Entries are ordered by magnitude and then by position, so ties are broken
/// identically on every client. An entry is "below" the threshold when its key
/// sorts strictly before the cut key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Nothing is below.
    NegInfinity,
    /// Keys strictly less than `(magnitude, index)` are below.
    Key { magnitude: f64, index: usize },
    /// Everything is below.
    PosInfinity,
}

impl Threshold {
    pub fn is_below(&self, magnitude: f64, index: usize) -> bool {
        match *self {
            Threshold::NegInfinity => false,
            Threshold::PosInfinity => true,
            Threshold::Key {
                magnitude: m,
                index: i,
            } => match magnitude.total_cmp(&m) {
                Ordering::Less => true,
                Ordering::Equal => index < i,
                Ordering::Greater => false,
            },
        }
    }

    /// Below-threshold flags for every entry of `magnitudes`.
    pub fn below_mask(&self, magnitudes: &[f64]) -> Vec<bool> {
        magnitudes
            .iter()
            .enumerate()
            .map(|(i, m)| self.is_below(*m, i))
            .collect()
    }
}

/// Threshold that places exactly `⌊s·len⌋` of `values` below it.
pub fn percentile_threshold(values: &[f64], s: f64) -> Result<Threshold> {
    if values.is_empty() {
        return Err(Error::Parameter("percentile of an empty vector".into()));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Parameter(format!("fraction {s} outside [0, 1]")));
    }
    let below = below_count(values.len(), s);
    if below == 0 {
        return Ok(Threshold::NegInfinity);
    }
    if below == values.len() {
        return Ok(Threshold::PosInfinity);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| values[i].abs();
    order.select_nth_unstable_by(below, |&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let cut = order[below];
    Ok(Threshold::Key {
        magnitude: key(cut),
        index: cut,
    })
}

/// `⌊s·len⌋`, guarded against representation error in `s·len` (0.7·10 is
/// 6.999…).
pub fn below_count(len: usize, s: f64) -> usize {
    let exact = s * len as f64;
    let rounded = exact.round();
    let n = if (exact - rounded).abs() <= 1e-9 * (len as f64).max(1.0) {
        rounded
    } else {
        exact.floor()
    };
    (n.max(0.0) as usize).min(len)
}
