//! Small dense linear-algebra kernels.
//!
//! Everything here is aimed at skinny `p × r` matrices with `r ≪ p` (sketches)
//! and at small square matrices used by the diagnostics. Matrices are stored
//! column-major so that the columns of a sketch are contiguous slices.

use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Default upper bound on the order of matrices accepted by [`eigh_small`].
pub const EIGH_CAP: usize = 4096;

/// Column-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from column-major entries.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(Error::DimensionMismatch {
                    expected: ncols,
                    found: row.len(),
                });
            }
            for (j, &x) in row.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Returns columns `j` and `k` (`j < k`) mutably at the same time.
    fn col_pair_mut(&mut self, j: usize, k: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(j < k);
        let (head, tail) = self.data.split_at_mut(k * self.rows);
        (
            &mut head[j * self.rows..(j + 1) * self.rows],
            &mut tail[..self.rows],
        )
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for (k, &b) in other.col(j).iter().enumerate() {
                if b != 0.0 {
                    axpy(b, self.col(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other`.
    pub fn t_matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: other.rows,
            });
        }
        Ok(Self::from_fn(self.cols, other.cols, |i, j| {
            dot(self.col(i), other.col(j))
        }))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: v.len(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (j, &x) in v.iter().enumerate() {
            if x != 0.0 {
                axpy(x, self.col(j), &mut out);
            }
        }
        Ok(out)
    }

    /// `selfᵀ v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: v.len(),
            });
        }
        Ok((0..self.cols).map(|j| dot(self.col(j), v)).collect())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest entry of `|self - selfᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.cols.min(self.rows) {
            for i in 0..j {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces `self` with `(self + selfᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        for j in 0..self.cols {
            for i in 0..j {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[j * self.rows + i]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[j * self.rows + i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Seeded random stream used everywhere randomness enters a run.
///
/// Uniforms come from xoshiro256++; normals use the polar-free Box–Muller
/// transform on two uniforms, caching the second variate. Both are fixed so
/// that a seed reproduces the same stream on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// `p × r` matrix of i.i.d. standard normals, filled column by column.
pub fn gaussian_matrix(rng: &mut SeededRng, p: usize, r: usize) -> DenseMatrix {
    DenseMatrix {
        rows: p,
        cols: r,
        data: rng.normal_vec(p * r),
    }
}

/// Economy QR by Householder reflections; returns the `p × r` orthonormal factor.
pub fn qr_econ(m: &DenseMatrix) -> Result<DenseMatrix> {
    let (p, r) = (m.rows, m.cols);
    if r > p {
        return Err(Error::InvalidArgument(format!(
            "qr_econ needs rows >= cols, got {p}x{r}"
        )));
    }
    let scale = m.frobenius_norm();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateSketch);
    }
    let tol = p as f64 * f64::EPSILON * scale;

    let mut a = m.clone();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(r);
    for k in 0..r {
        let x = &a.col(k)[k..];
        let alpha = norm(x);
        if alpha <= tol {
            return Err(Error::DegenerateSketch);
        }
        let mut v = x.to_vec();
        v[0] += alpha.copysign(x[0]);
        let beta = 2.0 / dot(&v, &v);
        for j in k..r {
            let col = &mut a.col_mut(j)[k..];
            let s = beta * dot(&v, col);
            axpy(-s, &v, col);
        }
        reflectors.push((v, beta));
    }

    let mut q = DenseMatrix::zeros(p, r);
    for j in 0..r {
        q[(j, j)] = 1.0;
    }
    for (k, (v, beta)) in reflectors.iter().enumerate().rev() {
        for j in k..r {
            let col = &mut q.col_mut(j)[k..];
            let s = beta * dot(v, col);
            axpy(-s, v, col);
        }
    }
    Ok(q)
}

/// Upper-triangular `C` with `CᵀC = A` for symmetric positive definite `A`.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: a.cols,
        });
    }
    let asym = a.asymmetry();
    if asym > 1e-10 * a.max_abs() {
        return Err(Error::NotSymmetric(asym));
    }
    let mut c = DenseMatrix::zeros(n, n);
    for j in 0..n {
        // Column j of C above the diagonal is contiguous in column-major storage.
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= c[(k, j)] * c[(k, j)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Indefinite {
                pivot: j,
                value: diag,
            });
        }
        let cjj = diag.sqrt();
        c[(j, j)] = cjj;
        for i in j + 1..n {
            let s = a[(j, i)] - dot(&c.col(j)[..j], &c.col(i)[..j]);
            c[(j, i)] = s / cjj;
        }
    }
    Ok(c)
}

/// Solves `B C = Y` for `B` with `C` upper triangular, one column at a time.
pub fn solve_upper_right(y: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix> {
    let r = c.rows;
    if c.cols != r || y.cols != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: y.cols,
        });
    }
    let mut b = y.clone();
    for j in 0..r {
        for k in 0..j {
            let ckj = c[(k, j)];
            if ckj != 0.0 {
                let (bk, bj) = b.col_pair_mut(k, j);
                axpy(-ckj, bk, bj);
            }
        }
        let inv = 1.0 / c[(j, j)];
        b.col_mut(j).iter_mut().for_each(|x| *x *= inv);
    }
    Ok(b)
}

/// Left singular vectors and singular values of a tall matrix.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    /// `p × r`, orthonormal columns.
    pub left: DenseMatrix,
    /// Descending, nonnegative.
    pub singular_values: Vec<f64>,
}

/// Thin SVD of a `p × r` matrix by one-sided (Hestenes) Jacobi rotations.
///
/// Columns are rotated pairwise until mutually orthogonal; their norms are the
/// singular values. Numerically null columns are replaced by an orthonormal
/// completion so the returned basis is always orthonormal.
pub fn thin_svd(b: &DenseMatrix) -> Result<ThinSvd> {
    let (p, r) = (b.rows, b.cols);
    if r > p {
        return Err(Error::InvalidArgument(format!(
            "thin_svd needs rows >= cols, got {p}x{r}"
        )));
    }
    let mut u = b.clone();
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..r {
            for j in i + 1..r {
                let (ui, uj) = u.col_pair_mut(i, j);
                let alpha = dot(ui, ui);
                let beta = dot(uj, uj);
                let gamma = dot(ui, uj);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in ui.iter_mut().zip(uj.iter_mut()) {
                    let (xi, yi) = (*x, *y);
                    *x = c * xi - s * yi;
                    *y = s * xi + c * yi;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = (0..r).map(|j| (j, norm(u.col(j)))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top = order.first().map_or(0.0, |x| x.1);
    let cutoff = top * p as f64 * f64::EPSILON;

    let mut left = DenseMatrix::zeros(p, r);
    let mut singular_values = Vec::with_capacity(r);
    let mut null_slots = Vec::new();
    for (slot, &(j, s)) in order.iter().enumerate() {
        singular_values.push(s);
        if s > cutoff && s > 0.0 {
            let dst = left.col_mut(slot);
            for (d, x) in dst.iter_mut().zip(u.col(j)) {
                *d = x / s;
            }
        } else {
            null_slots.push(slot);
        }
    }
    complete_orthonormal(&mut left, &null_slots);
    Ok(ThinSvd {
        left,
        singular_values,
    })
}

/// Fills the listed columns of `q` with unit vectors orthogonal to every other
/// column, trying standard basis vectors in order.
fn complete_orthonormal(q: &mut DenseMatrix, slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let p = q.rows;
    let mut filled: Vec<usize> = (0..q.cols).filter(|j| !slots.contains(j)).collect();
    let mut candidate = 0;
    for &slot in slots {
        loop {
            let mut v = vec![0.0; p];
            v[candidate % p] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &k in &filled {
                    let proj = dot(q.col(k), &v);
                    axpy(-proj, q.col(k), &mut v);
                }
            }
            let nv = norm(&v);
            if nv > 0.5 {
                v.iter_mut().for_each(|x| *x /= nv);
                q.col_mut(slot).copy_from_slice(&v);
                filled.push(slot);
                break;
            }
            assert!(candidate < 2 * p, "orthonormal completion ran out of candidates");
        }
    }
}

/// Eigendecomposition of a small symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

/// Symmetric eigensolver by cyclic Jacobi rotations, for matrices up to [`EIGH_CAP`].
pub fn eigh_small(a: &DenseMatrix) -> Result<SymmetricEigen> {
    eigh_small_capped(a, EIGH_CAP)
}

pub fn eigh_small_capped(a: &DenseMatrix, cap: usize) -> Result<SymmetricEigen> {
    let m = a.rows;
    if a.cols != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: a.cols,
        });
    }
    if m > cap {
        return Err(Error::TooLarge {
            what: "symmetric eigenproblem",
            size: m,
            cap,
        });
    }
    let scale = a.max_abs();
    let asym = a.asymmetry();
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let mut w = a.clone();
    w.symmetrize();
    let mut v = DenseMatrix::identity(m);
    let total = w.frobenius_norm();

    for _sweep in 0..100 {
        let mut off = 0.0;
        for j in 0..m {
            for i in 0..j {
                off += w[(i, j)] * w[(i, j)];
            }
        }
        if off.sqrt() <= f64::EPSILON * total * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                if apq.abs() <= 1e-3 * f64::EPSILON * (app.abs().min(aqq.abs())) {
                    w[(p, q)] = 0.0;
                    w[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                } else {
                    0.0
                };
                if t == 0.0 {
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                {
                    let (cp, cq) = w.col_pair_mut(p, q);
                    rotate(cp, cq, c, s);
                }
                // Symmetric matrix: updating rows equals updating the same
                // entries through the columns' transpose.
                for k in 0..m {
                    let wpk = w[(p, k)];
                    let wqk = w[(q, k)];
                    w[(p, k)] = c * wpk - s * wqk;
                    w[(q, k)] = s * wpk + c * wqk;
                }
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;
                let (vp, vq) = v.col_pair_mut(p, q);
                rotate(vp, vq, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| w[(i, i)].total_cmp(&w[(j, j)]));
    let eigenvalues = order.iter().map(|&i| w[(i, i)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(m, m);
    for (slot, &i) in order.iter().enumerate() {
        eigenvectors.col_mut(slot).copy_from_slice(v.col(i));
    }
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
    })
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

impl SymmetricEigen {
    /// Rebuilds `V f(Λ) Vᵀ`.
    pub fn apply_function(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let m = self.eigenvalues.len();
        let mut out = DenseMatrix::zeros(m, m);
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let fk = f(lambda);
            let vk = self.eigenvectors.col(k);
            for j in 0..m {
                let s = fk * vk[j];
                if s != 0.0 {
                    axpy(s, vk, out.col_mut(j));
                }
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }
}

/// Distance from `x` to the next larger representable `f64`.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    x.next_up() - x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        let mut worst = 0.0f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let a = gaussian_matrix(&mut SeededRng::new(7), 4, 2);
        let b = gaussian_matrix(&mut SeededRng::new(7), 4, 2);
        assert_eq!(a, b);
        let c = gaussian_matrix(&mut SeededRng::new(8), 4, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_sample_mean_is_near_zero() {
        let g = gaussian_matrix(&mut SeededRng::new(1), 10_000, 1);
        let mean = g.as_slice().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() <= 5.0 / 100.0, "mean {mean}");
        let single = gaussian_matrix(&mut SeededRng::new(3), 1, 1);
        assert!(single[(0, 0)].is_finite());
    }

    #[test]
    fn qr_of_identity_columns() {
        let m = DenseMatrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let q = qr_econ(&m).unwrap();
        for j in 0..3 {
            for i in 0..6 {
                assert!((q[(i, j)].abs() - m[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn qr_of_single_column() {
        let v = DenseMatrix::from_col_major(3, 1, vec![1.0, 2.0, 2.0]).unwrap();
        let q = qr_econ(&v).unwrap();
        let sign = q[(0, 0)].signum();
        for (i, x) in [1.0, 2.0, 2.0].iter().enumerate() {
            assert!((q[(i, 0)] - sign * x / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn qr_random_spans_input() {
        let m = gaussian_matrix(&mut SeededRng::new(11), 50, 5);
        let q = qr_econ(&m).unwrap();
        assert!(orthonormality_error(&q) <= 1e-12);
        let mut resid = m.clone();
        let proj = q.matmul(&q.t_matmul(&m).unwrap()).unwrap();
        resid.add_scaled(-1.0, &proj).unwrap();
        assert!(resid.frobenius_norm() <= 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let m = DenseMatrix::from_fn(5, 2, |i, _| i as f64 + 1.0);
        assert!(matches!(qr_econ(&m), Err(Error::DegenerateSketch)));
        assert!(matches!(
            qr_econ(&DenseMatrix::zeros(4, 2)),
            Err(Error::DegenerateSketch)
        ));
    }

    #[test]
    fn cholesky_small_cases() {
        let mut a = DenseMatrix::identity(3);
        a.scale(4.0);
        let c = cholesky(&a).unwrap();
        let mut expect = DenseMatrix::identity(3);
        expect.scale(2.0);
        assert_eq!(c, expect);

        let a = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let c = cholesky(&a).unwrap();
        let expect = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(c, expect);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let b = gaussian_matrix(&mut SeededRng::new(5), 8, 8);
        let mut a = b.t_matmul(&b).unwrap();
        a.add_scaled(1.0, &DenseMatrix::identity(8)).unwrap();
        let c = cholesky(&a).unwrap();
        let mut diff = c.t_matmul(&c).unwrap();
        diff.add_scaled(-1.0, &a).unwrap();
        assert!(diff.frobenius_norm() <= 1e-10 * a.frobenius_norm());
        for j in 0..8 {
            for i in j + 1..8 {
                assert_eq!(c[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::Indefinite { pivot: 1, .. })));
        let asym = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn triangular_solve_inverts_product() {
        let y = gaussian_matrix(&mut SeededRng::new(2), 9, 3);
        let c = DenseMatrix::from_rows(&[
            vec![2.0, 0.5, -1.0],
            vec![0.0, 1.5, 0.25],
            vec![0.0, 0.0, 3.0],
        ])
        .unwrap();
        let b = solve_upper_right(&y, &c).unwrap();
        let back = b.matmul(&c).unwrap();
        let mut diff = back;
        diff.add_scaled(-1.0, &y).unwrap();
        assert!(diff.max_abs() < 1e-14);
    }

    #[test]
    fn svd_small_cases() {
        let e1 = DenseMatrix::from_col_major(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let svd = thin_svd(&e1).unwrap();
        assert_eq!(svd.singular_values, vec![1.0]);
        assert_eq!(svd.left, e1);

        let b = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let svd = thin_svd(&b).unwrap();
        assert_eq!(svd.singular_values, vec![4.0, 3.0]);
        assert!(orthonormality_error(&svd.left) < 1e-15);
    }

    #[test]
    fn svd_of_zero_matrix_has_orthonormal_basis() {
        let svd = thin_svd(&DenseMatrix::zeros(5, 3)).unwrap();
        assert_eq!(svd.singular_values, vec![0.0; 3]);
        assert!(orthonormality_error(&svd.left) < 1e-15);
    }

    #[test]
    fn svd_reconstructs_random() {
        let b = gaussian_matrix(&mut SeededRng::new(40), 40, 6);
        let svd = thin_svd(&b).unwrap();
        assert!(orthonormality_error(&svd.left) <= 1e-10);
        assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        // W = Bᵀ V Σ⁻¹, then B ≈ V Σ Wᵀ = V Vᵀ B.
        let vtb = svd.left.t_matmul(&b).unwrap();
        let mut w = vtb.transpose();
        for (j, s) in svd.singular_values.iter().enumerate() {
            w.col_mut(j).iter_mut().for_each(|x| *x /= s);
        }
        assert!(orthonormality_error(&w) <= 1e-10);
        let mut recon = svd.left.clone();
        for (j, s) in svd.singular_values.iter().enumerate() {
            recon.col_mut(j).iter_mut().for_each(|x| *x *= s);
        }
        let mut diff = recon.matmul(&w.transpose()).unwrap();
        diff.add_scaled(-1.0, &b).unwrap();
        assert!(diff.frobenius_norm() <= 1e-10 * b.frobenius_norm());
    }

    #[test]
    fn eigh_small_cases() {
        let a = DenseMatrix::from_diag(&[3.0, 1.0, 2.0]);
        assert_eq!(eigh_small(&a).unwrap().eigenvalues, vec![1.0, 2.0, 3.0]);
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let e = eigh_small(&a).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-15);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eigh_random_symmetric() {
        let g = gaussian_matrix(&mut SeededRng::new(30), 30, 30);
        let mut a = g.clone();
        a.add_scaled(1.0, &g.transpose()).unwrap();
        let e = eigh_small(&a).unwrap();
        let trace: f64 = (0..30).map(|i| a[(i, i)]).sum();
        let sum: f64 = e.eigenvalues.iter().sum();
        assert!((trace - sum).abs() <= 1e-9 * trace.abs().max(1.0));
        let av = a.matmul(&e.eigenvectors).unwrap();
        let mut vl = e.eigenvectors.clone();
        for (j, l) in e.eigenvalues.iter().enumerate() {
            vl.col_mut(j).iter_mut().for_each(|x| *x *= l);
        }
        let mut diff = av;
        diff.add_scaled(-1.0, &vl).unwrap();
        assert!(diff.frobenius_norm() <= 1e-8 * a.frobenius_norm());
        assert!(orthonormality_error(&e.eigenvectors) < 1e-12);
    }

    #[test]
    fn eigh_enforces_cap() {
        let a = DenseMatrix::identity(5);
        assert!(matches!(
            eigh_small_capped(&a, 4),
            Err(Error::TooLarge { size: 5, cap: 4, .. })
        ));
    }

    #[test]
    fn ulp_matches_next_float() {
        assert_eq!(ulp(1.0), f64::EPSILON);
        assert!(ulp(0.0) > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn qr_is_orthonormal_and_spanning(seed in any::<u64>(), p in 2usize..40, r in 1usize..6) {
                let r = r.min(p);
                let m = gaussian_matrix(&mut SeededRng::new(seed), p, r);
                let q = qr_econ(&m).unwrap();
                prop_assert!(orthonormality_error(&q) <= 1e-12);
                let mut resid = m.clone();
                resid.add_scaled(-1.0, &q.matmul(&q.t_matmul(&m).unwrap()).unwrap()).unwrap();
                prop_assert!(resid.frobenius_norm() <= 1e-10 * m.frobenius_norm());
            }

            #[test]
            fn svd_values_descending(seed in any::<u64>(), p in 1usize..30, r in 1usize..6) {
                let r = r.min(p);
                let b = gaussian_matrix(&mut SeededRng::new(seed), p, r);
                let svd = thin_svd(&b).unwrap();
                prop_assert!(svd.singular_values.iter().all(|s| *s >= 0.0));
                prop_assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(orthonormality_error(&svd.left) <= 1e-10);
            }

            #[test]
            fn cholesky_roundtrip(seed in any::<u64>(), n in 1usize..12) {
                let b = gaussian_matrix(&mut SeededRng::new(seed), n + 2, n);
                let a = b.t_matmul(&b).unwrap();
                let c = cholesky(&a).unwrap();
                let mut diff = c.t_matmul(&c).unwrap();
                diff.add_scaled(-1.0, &a).unwrap();
                prop_assert!(diff.frobenius_norm() <= 1e-10 * a.frobenius_norm());
            }

            #[test]
            fn operations_are_deterministic(seed in any::<u64>()) {
                let m = gaussian_matrix(&mut SeededRng::new(seed), 12, 3);
                prop_assert_eq!(qr_econ(&m).unwrap(), qr_econ(&m).unwrap());
                prop_assert_eq!(thin_svd(&m).unwrap().left, thin_svd(&m).unwrap().left);
            }
        }
    }
}
