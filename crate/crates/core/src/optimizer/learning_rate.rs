use crate::error::{Error, Result};
use crate::linalg::{dot, norm, SeededRng};
use crate::nystrom::NystromApprox;

/// Estimates `λ₁(P^{-1/2} H P^{-1/2})` for `P = Ĥ + ρI` by `q` steps of power
/// iteration from a Gaussian start.
///
/// Returns the estimate and the number of `hvp` calls made. A non-positive
/// estimate is retried once from a fresh start before giving up.
pub fn preconditioned_top_eigenvalue<F>(
    mut hvp: F,
    nys: &NystromApprox,
    rho: f64,
    q: usize,
    rng: &mut SeededRng,
) -> Result<(f64, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if q == 0 {
        return Err(Error::InvalidArgument("power iteration needs q >= 1".into()));
    }
    let p = nys.dim();
    let mut calls = 0;
    let mut lambda = f64::NAN;
    for _attempt in 0..2 {
        let z = rng.normal_vec(p);
        let nz = norm(&z);
        let mut y: Vec<f64> = z.iter().map(|x| x / nz).collect();
        for _ in 0..q {
            let v = nys.precond_inv_sqrt(rho, &y)?;
            let hv = hvp(&v)?;
            calls += 1;
            let next = nys.precond_inv_sqrt(rho, &hv)?;
            lambda = dot(&y, &next);
            let nn = norm(&next);
            if !(nn > 0.0) || !nn.is_finite() {
                break;
            }
            y = next.into_iter().map(|x| x / nn).collect();
        }
        if lambda > 0.0 && lambda.is_finite() {
            return Ok((lambda, calls));
        }
    }
    Err(Error::LearningRate(lambda))
}

/// `α / λ₁(P^{-1/2} H_{S'} P^{-1/2})`, with the eigenvalue estimated by power
/// iteration; `hvp` must use a batch drawn independently of the one sketched.
///
/// Returns the learning rate and the number of `hvp` calls made.
pub fn estimate_learning_rate<F>(
    hvp: F,
    nys: &NystromApprox,
    rho: f64,
    alpha: f64,
    q: usize,
    rng: &mut SeededRng,
) -> Result<(f64, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let (lambda, calls) = preconditioned_top_eigenvalue(hvp, nys, rho, q, rng)?;
    Ok((alpha / lambda, calls))
}
