//! Randomized Nyström approximation of a subsampled Hessian, and the
//! preconditioner `P = Ĥ + ρI` applied through its eigenpairs in `O(pr)`.

use crate::error::{Error, Result};
use crate::linalg::{
    axpy, cholesky, gaussian_matrix, qr_econ, solve_upper_right, thin_svd, ulp, DenseMatrix,
    SeededRng,
};
use crate::oracles::Batch;

/// `Ĥ = V diag(λ) Vᵀ` with orthonormal `V` (`p × r`) and descending `λ ≥ 0`.
#[derive(Clone, Debug)]
pub struct NystromApprox {
    basis: DenseMatrix,
    eigenvalues: Vec<f64>,
    /// Iterate at which the approximated Hessian was evaluated, when known.
    pub anchor: Option<Vec<f64>>,
    /// Samples whose Hessian was sketched, when known.
    pub hessian_batch: Option<Batch>,
}

impl NystromApprox {
    /// Builds an approximation from explicit factors.
    pub fn from_factors(basis: DenseMatrix, eigenvalues: Vec<f64>) -> Result<Self> {
        if basis.cols() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.cols(),
                found: eigenvalues.len(),
            });
        }
        if eigenvalues.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "Nyström eigenvalues must be finite and nonnegative".into(),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "Nyström eigenvalues must be sorted descending".into(),
            ));
        }
        Ok(Self {
            basis,
            eigenvalues,
            anchor: None,
            hessian_batch: None,
        })
    }

    /// Rank-0 approximation (`Ĥ = 0`) in dimension `p`.
    pub fn empty(p: usize) -> Self {
        Self {
            basis: DenseMatrix::zeros(p, 0),
            eigenvalues: Vec::new(),
            anchor: None,
            hessian_batch: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn basis(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn check(&self, rho: f64, v: &[f64]) -> Result<()> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "preconditioner regularization must be positive, got {rho}"
            )));
        }
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `V f(λ) Vᵀv + c·(v − VVᵀv)`.
    fn spectral_apply(&self, v: &[f64], f: impl Fn(f64) -> f64, complement: f64) -> Vec<f64> {
        let coeffs: Vec<f64> = (0..self.rank())
            .map(|k| crate::linalg::dot(self.basis.col(k), v))
            .collect();
        let mut out: Vec<f64> = v.iter().map(|x| complement * x).collect();
        for (k, (&c, &lambda)) in coeffs.iter().zip(&self.eigenvalues).enumerate() {
            axpy(c * (f(lambda) - complement), self.basis.col(k), &mut out);
        }
        out
    }

    /// `(Ĥ + ρI)⁻¹ v` by the matrix inversion lemma.
    pub fn precond_solve(&self, rho: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check(rho, v)?;
        Ok(self.spectral_apply(v, |l| 1.0 / (l + rho), 1.0 / rho))
    }

    /// `(Ĥ + ρI)^{-1/2} v`.
    pub fn precond_inv_sqrt(&self, rho: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check(rho, v)?;
        Ok(self.spectral_apply(v, |l| 1.0 / (l + rho).sqrt(), 1.0 / rho.sqrt()))
    }

    /// `(Ĥ + ρI)^{1/2} v`.
    pub fn precond_sqrt(&self, rho: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check(rho, v)?;
        Ok(self.spectral_apply(v, |l| (l + rho).sqrt(), rho.sqrt()))
    }

    /// `Ĥ v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(self.spectral_apply(v, |l| l, 0.0))
    }

    /// Dense `p × p` copy of `Ĥ`.
    pub fn to_dense(&self) -> DenseMatrix {
        let p = self.dim();
        let mut h = DenseMatrix::zeros(p, p);
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let vk = self.basis.col(k);
            for j in 0..p {
                let s = lambda * vk[j];
                if s != 0.0 {
                    axpy(s, vk, h.col_mut(j));
                }
            }
        }
        h
    }
}

/// Randomized Nyström approximation of a PSD operator given only products with it.
///
/// `hvp` maps a `p × r` block `Q` to `HQ`. The Gaussian test matrix is drawn
/// from `rng` and orthonormalized; a degenerate draw is retried once.
pub fn rand_nys_approx<F>(mut hvp: F, p: usize, r: usize, rng: &mut SeededRng) -> Result<NystromApprox>
where
    F: FnMut(&DenseMatrix) -> Result<DenseMatrix>,
{
    if r == 0 || r > p {
        return Err(Error::InvalidArgument(format!(
            "sketch rank must satisfy 1 <= r <= p, got r = {r}, p = {p}"
        )));
    }
    let q = match qr_econ(&gaussian_matrix(rng, p, r)) {
        Ok(q) => q,
        Err(Error::DegenerateSketch) => qr_econ(&gaussian_matrix(rng, p, r))?,
        Err(e) => return Err(e),
    };
    let y = hvp(&q)?;
    if y.rows() != p || y.cols() != r {
        return Err(Error::DimensionMismatch {
            expected: p * r,
            found: y.rows() * y.cols(),
        });
    }
    nystrom_from_sketch(&y, &q)
}

/// Stabilized Nyström factorization from a sketch `Y = HQ` and its test matrix `Q`.
pub fn nystrom_from_sketch(y: &DenseMatrix, q: &DenseMatrix) -> Result<NystromApprox> {
    let p = q.rows();
    let y_norm = thin_svd(y)?.singular_values.first().copied().unwrap_or(0.0);
    let shift = (p as f64).sqrt() * ulp(y_norm);

    let mut y_shifted = y.clone();
    y_shifted.add_scaled(shift, q)?;
    let mut core = q.t_matmul(&y_shifted)?;
    core.symmetrize();
    let c = cholesky(&core).map_err(|e| Error::SketchNotPsd(Box::new(e)))?;
    let b = solve_upper_right(y, &c)?;
    let svd = thin_svd(&b)?;
    let eigenvalues = svd
        .singular_values
        .iter()
        .map(|s| (s * s - shift).max(0.0))
        .collect();
    Ok(NystromApprox {
        basis: svd.left,
        eigenvalues,
        anchor: None,
        hessian_batch: None,
    })
}
