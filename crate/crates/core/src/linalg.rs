//! Dense real matrix kernels.
//!
//! Everything here works on small row-major [`Matrix`] values: cyclic Jacobi
//! for symmetric eigenproblems, Hessenberg + Francis double-shift QR for the
//! spectral radius of a general matrix, one-sided Jacobi for singular values,
//! and Cholesky-based definiteness tests.

use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default relative asymmetry accepted by [`sym_eig`].
pub const DEFAULT_SYM_TOL: f64 = 1e-9;
/// Default relative rank cut-off for [`pinv_sym`].
pub const DEFAULT_RANK_TOL: f64 = 1e-12;
/// Largest condition number accepted by [`inv_spd_checked`] callers by default.
pub const DEFAULT_MAX_COND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {found}")]
    EntryCount {
        rows: usize,
        cols: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("matrix must have at least one row and one column")]
    Empty,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e} > {tol:.3e})")]
    NotSymmetric { asymmetry: f64, tol: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is ill-conditioned (condition estimate {cond:.3e} > {limit:.3e})")]
    IllConditioned { cond: f64, limit: f64 },
    #[error("QR eigenvalue iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// Immutable dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting bad shapes and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::EntryCount {
                rows,
                cols,
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(nrows * ncols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(LinalgError::RaggedRows {
                    row: i,
                    expected: ncols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(nrows, ncols, data)
    }

    pub(crate) fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// 1x1 matrix.
    pub fn scalar(x: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(|r| r.to_vec()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self + s·I`.
    pub fn add_identity(&self, s: f64) -> Self {
        assert!(self.is_square(), "add_identity on a non-square matrix");
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square(), "symmetrize on a non-square matrix");
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    /// `‖M − Mᵀ‖_F`.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square(), "asymmetry on a non-square matrix");
        let mut s = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = self.get(i, j) - self.get(j, i);
                s += d * d;
            }
        }
        s.sqrt()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self · diag(d)`.
    pub fn mul_diag(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.cols, "mul_diag dimension mismatch");
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * d[j])
    }

    /// Assembles `[[tl, tr], [bl, br]]`.
    pub fn block2x2(tl: &Matrix, tr: &Matrix, bl: &Matrix, br: &Matrix) -> Self {
        assert_eq!(tl.rows, tr.rows);
        assert_eq!(bl.rows, br.rows);
        assert_eq!(tl.cols, bl.cols);
        assert_eq!(tr.cols, br.cols);
        let (r0, c0) = tl.shape();
        Self::from_fn(tl.rows + bl.rows, tl.cols + tr.cols, |i, j| match (i < r0, j < c0) {
            (true, true) => tl.get(i, j),
            (true, false) => tr.get(i, j - c0),
            (false, true) => bl.get(i - r0, j),
            (false, false) => br.get(i - r0, j - c0),
        })
    }

    /// Horizontal concatenation.
    pub fn hstack(blocks: &[Matrix]) -> Self {
        let rows = blocks[0].rows;
        assert!(blocks.iter().all(|b| b.rows == rows), "hstack row mismatch");
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut off = 0;
        for b in blocks {
            for i in 0..rows {
                for j in 0..b.cols {
                    out.data[i * cols + off + j] = b.get(i, j);
                }
            }
            off += b.cols;
        }
        out
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[Matrix]) -> Self {
        let cols = blocks[0].cols;
        assert!(blocks.iter().all(|b| b.cols == cols), "vstack column mismatch");
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Self { rows, cols, data }
    }

    fn square_dim(&self) -> Result<usize, LinalgError> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols)).finish()
    }
}

impl<'a> Add<&'a Matrix> for &'a Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<'a> Sub<&'a Matrix> for &'a Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl<'a> Mul<&'a Matrix> for &'a Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let orow = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        }
    }
}

impl Neg for &Matrix {
    type Output = Matrix;

    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Symmetric eigendecomposition `M = V diag(λ) Vᵀ`, eigenvalues non-increasing.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEigResult {
    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let v = &self.eigenvectors;
        &v.mul_diag(&mapped) * &v.transpose()
    }
}

/// Cyclic Jacobi eigensolver for symmetric input.
///
/// `tol` bounds the accepted asymmetry relative to `‖M‖_F`; the matrix is
/// symmetrized before rotating.
pub fn sym_eig(m: &Matrix, tol: f64) -> Result<SymEigResult, LinalgError> {
    let n = m.square_dim()?;
    let norm = m.frobenius_norm();
    let asym = m.asymmetry();
    if asym > tol * norm {
        return Err(LinalgError::NotSymmetric {
            asymmetry: if norm > 0.0 { asym / norm } else { asym },
            tol,
        });
    }
    let mut a = m.symmetrize().data;
    let mut v = Matrix::identity(n).data;

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= f64::EPSILON * 1e-2 * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, so output is deterministic.
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v[r * n + order[c]]);
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Eigenvalues of a symmetric matrix, non-increasing.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>, LinalgError> {
    Ok(sym_eig(m, DEFAULT_SYM_TOL)?.eigenvalues)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64, LinalgError> {
    Ok(sym_eig(m, DEFAULT_SYM_TOL)?.min())
}

/// Largest modulus over the (possibly complex) eigenvalues of a square matrix.
pub fn spectral_radius(m: &Matrix) -> Result<f64, LinalgError> {
    let (re, im) = eigenvalues_general(m)?;
    Ok(re.iter().zip(&im).fold(0.0, |r, (x, y)| r.max(x.hypot(*y))))
}

/// All eigenvalues of a general square matrix as `(real parts, imaginary parts)`.
pub fn eigenvalues_general(m: &Matrix) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    m.square_dim()?;
    let mut h = m.to_rows();
    hessenberg_reduce(&mut h);
    hessenberg_qr(&mut h)
}

/// Householder reduction to upper Hessenberg form, in place.
fn hessenberg_reduce(h: &mut [Vec<f64>]) {
    let n = h.len();
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i][m - 1].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i][m - 1] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let f = (m..=high).rev().map(|i| ort[i] * h[i][j]).sum::<f64>() / hh;
            for i in m..=high {
                h[i][j] -= f * ort[i];
            }
        }
        for row in h.iter_mut() {
            let f = (m..=high).rev().map(|j| ort[j] * row[j]).sum::<f64>() / hh;
            for j in m..=high {
                row[j] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[m][m - 1] = scale * g;
    }
    for i in 2..n {
        for j in 0..i - 1 {
            h[i][j] = 0.0;
        }
    }
}

const QR_MAX_ITS: usize = 60;

/// Francis double-shift QR on an upper Hessenberg matrix, eigenvalues only.
fn hessenberg_qr(a: &mut [Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let n = a.len();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[i][j].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    let mut sweeps = 0usize;
    while nn >= 0 {
        let mut its = 0usize;
        loop {
            let nu = nn as usize;
            // Look for a single small subdiagonal element.
            let mut l = nu;
            while l > 0 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                its = 0;
            } else {
                let mut y = a[nu - 1][nu - 1];
                let mut w = a[nu][nu - 1] * a[nu - 1][nu];
                if l == nu - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + z.copysign(p);
                        wr[nu - 1] = x + z;
                        wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                        wi[nu - 1] = 0.0;
                        wi[nu] = 0.0;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                    its = 0;
                } else {
                    if its == QR_MAX_ITS {
                        return Err(LinalgError::NoConvergence { sweeps });
                    }
                    if its > 0 && its.is_multiple_of(10) {
                        // Exceptional shift.
                        t += x;
                        for i in 0..=nu {
                            a[i][i] -= x;
                        }
                        let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    sweeps += 1;
                    let (mut p, mut q, mut r);
                    let mut m = nu - 2;
                    loop {
                        let z = a[m][m];
                        let rr = x - z;
                        let ss = y - z;
                        p = (rr * ss - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - rr - ss;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nu - 1 {
                        a[i + 2][i] = 0.0;
                        if i != m {
                            a[i + 2][i - 1] = 0.0;
                        }
                    }
                    let mut k = m;
                    while k < nu {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = if k + 1 != nu { a[k + 2][k - 1] } else { 0.0 };
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = (p * p + q * q + r * r).sqrt().copysign(p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a[k][k - 1] = -a[k][k - 1];
                                }
                            } else {
                                a[k][k - 1] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            let z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nu {
                                let mut pp = a[k][j] + q * a[k + 1][j];
                                if k + 1 != nu {
                                    pp += r * a[k + 2][j];
                                    a[k + 2][j] -= pp * z;
                                }
                                a[k + 1][j] -= pp * y;
                                a[k][j] -= pp * x;
                            }
                            let mmin = nu.min(k + 3);
                            for row in a.iter_mut().take(mmin + 1).skip(l) {
                                let mut pp = x * row[k] + y * row[k + 1];
                                if k + 1 != nu {
                                    pp += z * row[k + 2];
                                    row[k + 2] -= pp * r;
                                }
                                row[k + 1] -= pp * q;
                                row[k] -= pp;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 0 || l + 1 >= nn as usize {
                break;
            }
        }
    }
    Ok((wr, wi))
}

/// Singular values, non-increasing, via one-sided Jacobi on the taller orientation.
///
/// Returns `min(rows, cols)` values.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let work = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let (rows, cols) = work.shape();
    // Column-major copy so column rotations touch contiguous memory.
    let mut colv: Vec<Vec<f64>> = (0..cols).map(|j| work.column(j)).collect();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = colv[p].iter().map(|x| x * x).sum();
                let beta: f64 = colv[q].iter().map(|x| x * x).sum();
                let gamma: f64 = colv[p].iter().zip(&colv[q]).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                let (lo, hi) = colv.split_at_mut(q);
                for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let a = *xp;
                    let b = *xq;
                    *xp = c * a - s * b;
                    *xq = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let _ = rows;
    let mut sv: Vec<f64> = colv
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank with threshold `rel_tol · σ₁`.
pub fn rank(m: &Matrix, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let s1 = sv.first().copied().unwrap_or(0.0);
    if s1 == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * s1).count()
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Strict factorization; `None` unless `m` (symmetrized) is positive definite.
    pub fn factor(m: &Matrix) -> Option<Self> {
        match cholesky_pivots(m, 0.0) {
            Ok(l) => Some(Self { l }),
            Err(_) => None,
        }
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.l.rows;
        assert_eq!(b.rows, n, "cholesky solve dimension mismatch");
        let l = &self.l;
        let mut x = b.clone();
        for c in 0..b.cols {
            for i in 0..n {
                let mut s = x.data[i * b.cols + c];
                for k in 0..i {
                    s -= l.get(i, k) * x.data[k * b.cols + c];
                }
                x.data[i * b.cols + c] = s / l.get(i, i);
            }
            for i in (0..n).rev() {
                let mut s = x.data[i * b.cols + c];
                for k in i + 1..n {
                    s -= l.get(k, i) * x.data[k * b.cols + c];
                }
                x.data[i * b.cols + c] = s / l.get(i, i);
            }
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.l.rows)).symmetrize()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Outcome of [`chol_psd`].
#[derive(Debug, Clone)]
pub enum CholPsd {
    Factor(Cholesky),
    /// Zero-based index of the first non-positive pivot.
    NotPd {
        pivot: usize,
    },
}

impl CholPsd {
    pub fn is_factor(&self) -> bool {
        matches!(self, CholPsd::Factor(_))
    }
}

/// Cholesky of `sym(M) + shift_tol·I`: succeeds iff `M ≻ −shift_tol·I`.
pub fn chol_psd(m: &Matrix, shift_tol: f64) -> Result<CholPsd, LinalgError> {
    m.square_dim()?;
    Ok(match cholesky_pivots(m, shift_tol) {
        Ok(l) => CholPsd::Factor(Cholesky { l }),
        Err(pivot) => CholPsd::NotPd { pivot },
    })
}

fn cholesky_pivots(m: &Matrix, shift: f64) -> Result<Matrix, usize> {
    let n = m.rows;
    let a = m.symmetrize();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + shift;
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(j);
        }
        let ljj = d.sqrt();
        l.data[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.data[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// True when `sym(M) − margin·I` is positive definite.
pub fn is_pd_with_margin(m: &Matrix, margin: f64) -> bool {
    m.is_square() && cholesky_pivots(&m.add_identity(-margin), 0.0).is_ok()
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix; eigenvalues with
/// `|λ| ≤ rank_tol·max|λ|` are treated as zero.
pub fn pinv_sym(m: &Matrix, rank_tol: f64) -> Result<Matrix, LinalgError> {
    let eig = sym_eig(m, DEFAULT_SYM_TOL)?;
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
    let cut = rank_tol * top;
    Ok(eig
        .map_spectrum(|l| if top > 0.0 && l.abs() > cut { 1.0 / l } else { 0.0 })
        .symmetrize())
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix, LinalgError> {
    let eig = sym_eig(m, DEFAULT_SYM_TOL)?;
    Ok(eig.map_spectrum(|l| l.max(0.0).sqrt()).symmetrize())
}

/// Inverse of a symmetric positive definite matrix through its eigendecomposition,
/// refusing when `λ_max/λ_min > max_cond`.
pub fn inv_spd_checked(m: &Matrix, max_cond: f64) -> Result<Matrix, LinalgError> {
    let eig = sym_eig(m, DEFAULT_SYM_TOL)?;
    let (hi, lo) = (eig.max(), eig.min());
    if !(lo > 0.0) {
        return Err(LinalgError::NotPositiveDefinite);
    }
    let cond = hi / lo;
    if cond > max_cond {
        return Err(LinalgError::IllConditioned { cond, limit: max_cond });
    }
    Ok(eig.map_spectrum(|l| 1.0 / l).symmetrize())
}
