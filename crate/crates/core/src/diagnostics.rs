//! Dense spectral diagnostics of preconditioner quality.
//!
//! Everything here assembles `p × p` matrices and eigendecomposes them, so the
//! routines are capped by [`DiagnosticCaps`] and meant for small instances.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, eigh_small_capped, DenseMatrix, SeededRng, SymmetricEigen};
use crate::nystrom::NystromApprox;
use crate::optimizer::build_preconditioner;
use crate::oracles::{BatchSampler, ProblemOracle};

/// Relative floor applied to eigenvalues before inverting square roots.
const EIG_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticCaps {
    pub max_p: usize,
    pub max_n: usize,
}

impl Default for DiagnosticCaps {
    fn default() -> Self {
        Self {
            max_p: 2048,
            max_n: 20_000,
        }
    }
}

impl DiagnosticCaps {
    fn check_p(&self, p: usize) -> Result<()> {
        if p > self.max_p {
            return Err(Error::TooLarge {
                what: "feature dimension p",
                size: p,
                cap: self.max_p,
            });
        }
        Ok(())
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n > self.max_n {
            return Err(Error::TooLarge {
                what: "sample count n",
                size: n,
                cap: self.max_n,
            });
        }
        Ok(())
    }
}

/// Dense Hessian `(1/n) Σ dᵢ aᵢaᵢᵀ + γI` at `w`.
pub fn dense_hessian(oracle: &ProblemOracle, w: &[f64], caps: &DiagnosticCaps) -> Result<DenseMatrix> {
    let p = oracle.p();
    caps.check_p(p)?;
    let curv = oracle.curvatures(w)?;
    let data = oracle.data();
    let mut h = DenseMatrix::zeros(p, p);
    let inv_n = 1.0 / oracle.n() as f64;
    for (i, &d) in curv.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row: Vec<(usize, f64)> = data.row_entries(i).filter(|&(_, a)| a != 0.0).collect();
        for &(j, aj) in &row {
            let col = h.col_mut(j);
            let s = d * inv_n * aj;
            for &(k, ak) in &row {
                col[k] += s * ak;
            }
        }
    }
    for j in 0..p {
        h.col_mut(j)[j] += oracle.l2();
    }
    h.symmetrize();
    Ok(h)
}

fn eigh(a: &DenseMatrix, caps: &DiagnosticCaps) -> Result<SymmetricEigen> {
    let mut a = a.clone();
    a.symmetrize();
    eigh_small_capped(&a, caps.max_p)
}

/// `Σᵢ λᵢ/(λᵢ + β)`.
pub fn effective_dimension(eigenvalues: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(eigenvalues.iter().map(|&l| l / (l + beta)).sum())
}

/// Largest eigenvalue of `diag(d) + zzᵀ`, found by bisection on the secular
/// equation `1 = Σ zⱼ²/(λ − dⱼ)` over `[max d, max d + ‖z‖²]`.
fn top_eig_diag_rank1(d: &[f64], z: &[f64]) -> f64 {
    let dmax = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let zz: f64 = z.iter().map(|x| x * x).sum();
    if zz == 0.0 {
        return dmax;
    }
    // g(λ) = 1 − Σ zⱼ²/(λ − dⱼ) is increasing on (max d, ∞); the answer is its
    // root, or max d itself when g is already nonnegative there (z ⟂ top block).
    let g = |lambda: f64| -> f64 {
        let mut s = 0.0;
        for (&dj, &zj) in d.iter().zip(z) {
            if zj == 0.0 {
                continue;
            }
            let gap = lambda - dj;
            if gap <= 0.0 {
                return f64::NEG_INFINITY;
            }
            s += zj * zj / gap;
        }
        1.0 - s
    };
    let (mut lo, mut hi) = (dmax, dmax + zz);
    if g(lo) >= 0.0 {
        return lo;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return hi;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// ρ-dissimilarity together with the quantities of its a-priori bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dissimilarity {
    pub tau: f64,
    /// `max_i λ₁(∇²fᵢ(w))`, including `γ`.
    pub max_sample_curvature: f64,
    /// `λ_min(H(w))`, including `γ`.
    pub mu: f64,
    /// `min{n, (M + ρ)/(μ + ρ)}`.
    pub bound: f64,
}

/// `max_i λ₁((H+ρI)^{-1/2}(∇²fᵢ+ρI)(H+ρI)^{-1/2})` with `∇²fᵢ = dᵢaᵢaᵢᵀ + γI`.
///
/// In the eigenbasis `H + ρI = V diag(s) Vᵀ` each inner matrix is
/// `diag((γ+ρ)/s) + zzᵀ` with `z = √dᵢ diag(s)^{-1/2} Vᵀaᵢ`, whose top eigenvalue
/// is computed exactly from the secular equation.
pub fn rho_dissimilarity(oracle: &ProblemOracle, w: &[f64], rho: f64, caps: &DiagnosticCaps) -> Result<Dissimilarity> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let (n, p) = (oracle.n(), oracle.p());
    caps.check_n(n)?;
    let h = dense_hessian(oracle, w, caps)?;
    let eig = eigh(&h, caps)?;
    let mu = eig.min();
    let top = eig.max() + rho;
    let s: Vec<f64> = eig.eigenvalues.iter().map(|&l| (l + rho).max(EIG_FLOOR * top)).collect();
    let l2 = oracle.l2();
    let diag: Vec<f64> = s.iter().map(|&sj| (l2 + rho) / sj).collect();
    let curv = oracle.curvatures(w)?;
    let data = oracle.data();
    let v = &eig.eigenvectors;

    let per_sample: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut a = vec![0.0; p];
            data.row_axpy(i, 1.0, &mut a);
            let d = curv[i];
            let scale = d.max(0.0).sqrt();
            let z: Vec<f64> = (0..p).map(|j| scale * dot(v.col(j), &a) / s[j].sqrt()).collect();
            (top_eig_diag_rank1(&diag, &z), d * dot(&a, &a) + l2)
        })
        .collect();

    let tau = per_sample.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
    let m = per_sample.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(Dissimilarity {
        tau,
        max_sample_curvature: m,
        mu,
        bound: (n as f64).min((m + rho) / (mu + rho)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumContext {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub rank: usize,
    pub hessian_batch: Option<usize>,
    pub w_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectiveDimension {
    pub beta: f64,
    pub value: f64,
}

/// Spectra of `H(w)` before and after preconditioning by `P = Ĥ + ρI`.
///
/// Eigenvalue lists are descending. `H` includes the `l2` term; the residual
/// is `E = H − Ĥ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub context: SpectrumContext,
    /// Top eigenvalues of `H`.
    pub eig_raw: Vec<f64>,
    /// Top eigenvalues of `P^{-1/2} H P^{-1/2}`.
    pub eig_precond: Vec<f64>,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub kappa_raw: f64,
    pub kappa_precond: f64,
    /// `kappa_raw / kappa_precond`.
    pub improvement: f64,
    /// Extreme eigenvalues of `P^{-1/2}(H + ρI)P^{-1/2}`.
    pub sandwich_min: f64,
    pub sandwich_max: f64,
    /// `‖E‖₂`.
    pub residual_norm: f64,
    /// `sandwich_min − 1`; nonnegative when `E ⪰ 0`.
    pub lower_margin: f64,
    /// `1 + ‖E‖/ρ − sandwich_max`.
    pub upper_margin: f64,
    /// `(1 + ρ/μ)(1 + ‖E‖/ρ)` with `μ = lambda_min`.
    pub kappa_bound: f64,
    pub tau: Option<f64>,
    pub effective_dimension: Vec<EffectiveDimension>,
}

fn kappa(max: f64, min: f64) -> f64 {
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn descending_top(eig: &SymmetricEigen, m: usize) -> Vec<f64> {
    eig.eigenvalues.iter().rev().take(m).copied().collect()
}

/// Compares `H(w)` against `P = Ĥ + ρI` densely; `top_m` bounds the length of
/// the reported eigenvalue lists.
pub fn sandwich_check(
    oracle: &ProblemOracle,
    w: &[f64],
    nys: &NystromApprox,
    rho: f64,
    top_m: usize,
    caps: &DiagnosticCaps,
) -> Result<SpectrumReport> {
    let p = oracle.p();
    if nys.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: nys.dim(),
        });
    }
    let h = dense_hessian(oracle, w, caps)?;
    let raw = eigh(&h, caps)?;

    let mut inv_sqrt = DenseMatrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = nys.precond_inv_sqrt(rho, &e)?;
        inv_sqrt.col_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    let pre = eigh(&inv_sqrt.matmul(&h)?.matmul(&inv_sqrt)?, caps)?;

    let mut resid = h.clone();
    resid.add_scaled(-1.0, &nys.to_dense())?;
    let resid_eig = eigh(&resid, caps)?;
    let residual_norm = resid_eig.max().abs().max(resid_eig.min().abs());

    // P^{-1/2}(H + ρI)P^{-1/2} = P^{-1/2}HP^{-1/2} + ρP^{-1}; assemble it directly
    // rather than shifting, since the second term is not a multiple of I.
    let mut h_rho = h.clone();
    for j in 0..p {
        h_rho.col_mut(j)[j] += rho;
    }
    let sandwich = eigh(&inv_sqrt.matmul(&h_rho)?.matmul(&inv_sqrt)?, caps)?;

    let (lambda_max, lambda_min) = (raw.max(), raw.min());
    let kappa_raw = kappa(lambda_max, lambda_min);
    let kappa_precond = kappa(pre.max(), pre.min());
    Ok(SpectrumReport {
        context: SpectrumContext {
            n: oracle.n(),
            p,
            rho,
            rank: nys.rank(),
            hessian_batch: nys.hessian_batch.as_ref().map(|b| b.len()),
            w_norm: dot(w, w).sqrt(),
        },
        eig_raw: descending_top(&raw, top_m),
        eig_precond: descending_top(&pre, top_m),
        lambda_max,
        lambda_min,
        kappa_raw,
        kappa_precond,
        improvement: kappa_raw / kappa_precond,
        sandwich_min: sandwich.min(),
        sandwich_max: sandwich.max(),
        residual_norm,
        lower_margin: sandwich.min() - 1.0,
        upper_margin: 1.0 + residual_norm / rho - sandwich.max(),
        kappa_bound: (1.0 + rho / lambda_min) * (1.0 + residual_norm / rho),
        tau: None,
        effective_dimension: Vec::new(),
    })
}

/// How [`conditioning_report`] builds its preconditioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub rank: usize,
    /// `None` uses `10⁻³·L̂`.
    pub rho: Option<f64>,
    /// `None` uses every sample.
    pub hessian_batch: Option<usize>,
    pub top_m: usize,
    pub seed: u64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            rho: None,
            hessian_batch: None,
            top_m: 100,
            seed: 0,
        }
    }
}

/// Sketches a preconditioner at `w` and reports the spectrum before and after.
pub fn conditioning_report(
    oracle: &ProblemOracle,
    w: &[f64],
    config: &ConditioningConfig,
    caps: &DiagnosticCaps,
) -> Result<SpectrumReport> {
    caps.check_p(oracle.p())?;
    let rho = config.rho.unwrap_or(1e-3 * oracle.smoothness_upper_bound());
    let b_h = config.hessian_batch.unwrap_or(oracle.n()).min(oracle.n());
    let rank = config.rank.min(oracle.p());
    let mut rng = SeededRng::new(config.seed);
    let mut sampler = BatchSampler::new(oracle.n());
    let nys = build_preconditioner(oracle, w, rank, b_h, &mut sampler, &mut rng)?;
    sandwich_check(oracle, w, &nys, rho, config.top_m, caps)
}

/// Writes `index,eig_raw,eig_precond` rows (1-based index).
pub fn write_spectrum_csv<W: Write>(report: &SpectrumReport, mut out: W) -> Result<()> {
    writeln!(out, "index,eig_raw,eig_precond")?;
    let m = report.eig_raw.len().max(report.eig_precond.len());
    let cell = |v: &[f64], i: usize| v.get(i).map(|x| x.to_string()).unwrap_or_default();
    for i in 0..m {
        writeln!(out, "{},{},{}", i + 1, cell(&report.eig_raw, i), cell(&report.eig_precond, i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{DataMatrix, Task};
    use crate::synthetic::planted_least_squares;

    fn random_oracle(seed: u64, n: usize, p: usize, task: Task, l2: f64) -> ProblemOracle {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(p)).collect();
        let labels = (0..n)
            .map(|_| match task {
                Task::Ridge => rng.standard_normal(),
                Task::Logistic => if rng.uniform() < 0.5 { 1.0 } else { -1.0 },
            })
            .collect();
        ProblemOracle::new(DataMatrix::from_rows(&rows, labels).unwrap(), task, l2).unwrap()
    }

    fn dense_top(a: &DenseMatrix) -> f64 {
        eigh_small_capped(a, 4096).unwrap().max()
    }

    #[test]
    fn secular_matches_dense() {
        let mut rng = SeededRng::new(1);
        for _ in 0..20 {
            let d: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            let mut z = rng.normal_vec(6);
            if rng.uniform() < 0.3 {
                z[0] = 0.0;
            }
            let mut m = DenseMatrix::from_diag(&d);
            for j in 0..6 {
                for i in 0..6 {
                    m.col_mut(j)[i] += z[i] * z[j];
                }
            }
            let want = dense_top(&m);
            assert!((top_eig_diag_rank1(&d, &z) - want).abs() <= 1e-12 * want);
        }
        assert_eq!(top_eig_diag_rank1(&[0.5, 0.25], &[0.0, 0.0]), 0.5);
    }

    #[test]
    fn dissimilarity_matches_brute_force() {
        let o = random_oracle(3, 25, 5, Task::Logistic, 0.01);
        let w = SeededRng::new(4).normal_vec(5);
        let rho = 0.05;
        let caps = DiagnosticCaps::default();
        let h = dense_hessian(&o, &w, &caps).unwrap();
        let mut h_rho = h.clone();
        for j in 0..5 {
            h_rho.col_mut(j)[j] += rho;
        }
        let isq = eigh_small_capped(&h_rho, 10).unwrap().apply_function(|l| 1.0 / l.sqrt());
        let curv = o.curvatures(&w).unwrap();
        let mut brute = 0.0f64;
        for i in 0..25 {
            let mut a = vec![0.0; 5];
            o.data().row_axpy(i, 1.0, &mut a);
            let mut hi = DenseMatrix::from_fn(5, 5, |r, c| curv[i] * a[r] * a[c]);
            for j in 0..5 {
                hi.col_mut(j)[j] += o.l2() + rho;
            }
            let mut inner = isq.matmul(&hi).unwrap().matmul(&isq).unwrap();
            inner.symmetrize();
            brute = brute.max(dense_top(&inner));
        }
        let got = rho_dissimilarity(&o, &w, rho, &caps).unwrap();
        assert!((got.tau - brute).abs() <= 1e-10 * brute, "{} vs {brute}", got.tau);
    }

    #[test]
    fn identical_samples_and_single_sample_give_one() {
        let rows = vec![vec![1.0, 2.0, -1.0]; 4];
        let o = ProblemOracle::new(DataMatrix::from_rows(&rows, vec![0.0; 4]).unwrap(), Task::Ridge, 0.0).unwrap();
        let t = rho_dissimilarity(&o, &[0.0; 3], 0.1, &DiagnosticCaps::default()).unwrap();
        assert!((t.tau - 1.0).abs() < 1e-12);
        let o = random_oracle(7, 1, 4, Task::Logistic, 0.0);
        let t = rho_dissimilarity(&o, &[0.1; 4], 0.3, &DiagnosticCaps::default()).unwrap();
        assert!((t.tau - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dissimilarity_bound_on_random_logistic() {
        let o = random_oracle(11, 200, 30, Task::Logistic, 1e-3);
        let w = SeededRng::new(12).normal_vec(30);
        let t = rho_dissimilarity(&o, &w, 0.01, &DiagnosticCaps::default()).unwrap();
        assert!(t.tau >= 1.0 - 1e-10);
        assert!(t.tau <= t.bound * (1.0 + 1e-12), "{} > {}", t.tau, t.bound);
    }

    #[test]
    fn caps_are_enforced() {
        let o = random_oracle(1, 30, 6, Task::Ridge, 0.0);
        let caps = DiagnosticCaps { max_p: 5, max_n: 100 };
        assert!(matches!(dense_hessian(&o, &[0.0; 6], &caps), Err(Error::TooLarge { .. })));
        let caps = DiagnosticCaps { max_p: 100, max_n: 10 };
        assert!(matches!(rho_dissimilarity(&o, &[0.0; 6], 0.1, &caps), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn effective_dimension_cases() {
        assert_eq!(effective_dimension(&[1.0; 6], 1.0).unwrap(), 3.0);
        let eigs = [4.0, 2.0, 1.0];
        let beta = 1e6 * 4.0;
        assert!(effective_dimension(&eigs, beta).unwrap() <= 7.0 / beta);
        assert!(effective_dimension(&eigs, 0.0).is_err());

        let mut rng = SeededRng::new(2);
        let g = DenseMatrix::from_fn(8, 8, |_, _| rng.standard_normal());
        let a = g.t_matmul(&g).unwrap();
        let eig = eigh_small_capped(&a, 10).unwrap();
        let beta = 0.7;
        let dense = eig.apply_function(|l| l / (l + beta));
        let trace: f64 = (0..8).map(|i| dense[(i, i)]).sum();
        let got = effective_dimension(&eig.eigenvalues.iter().map(|l| l.max(0.0)).collect::<Vec<_>>(), beta).unwrap();
        assert!((got - trace).abs() < 1e-10);
    }

    #[test]
    fn exact_preconditioner_is_identity() {
        let o = random_oracle(5, 40, 6, Task::Ridge, 0.0);
        let w = vec![0.0; 6];
        let cfg = ConditioningConfig {
            rank: 6,
            rho: Some(1e-3),
            ..ConditioningConfig::default()
        };
        let r = conditioning_report(&o, &w, &cfg, &DiagnosticCaps::default()).unwrap();
        assert!((r.sandwich_min - 1.0).abs() < 1e-6 && (r.sandwich_max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rank_zero_preconditioner() {
        let o = random_oracle(6, 30, 5, Task::Ridge, 0.0);
        let w = vec![0.0; 5];
        let rho = 0.2;
        let r = sandwich_check(&o, &w, &NystromApprox::empty(5), rho, 5, &DiagnosticCaps::default()).unwrap();
        assert!((r.sandwich_max - (r.lambda_max + rho) / rho).abs() < 1e-10 * r.sandwich_max);
        assert!((r.improvement - 1.0).abs() < 1e-8);
    }

    #[test]
    fn certificates_on_random_ridge() {
        let o = random_oracle(8, 60, 20, Task::Ridge, 1e-2);
        let w = vec![0.0; 20];
        let cfg = ConditioningConfig {
            rank: 10,
            rho: Some(0.05),
            ..ConditioningConfig::default()
        };
        let r = conditioning_report(&o, &w, &cfg, &DiagnosticCaps::default()).unwrap();
        assert!(r.lower_margin >= -1e-8);
        assert!(r.upper_margin >= -1e-8);
        assert!(r.kappa_precond <= r.kappa_bound * (1.0 + 1e-10));
    }

    #[test]
    fn planted_report_matches_dense() {
        let spectrum: Vec<f64> = (1..=100).map(|i| 1.0 / (i as f64 * i as f64)).collect();
        let prob = planted_least_squares(300, 100, &spectrum, 2).unwrap();
        let o = ProblemOracle::new(prob.data, Task::Ridge, 0.0).unwrap();
        let r = sandwich_check(&o, &vec![0.0; 100], &NystromApprox::empty(100), 1.0, 100, &DiagnosticCaps::default()).unwrap();
        for (got, want) in r.eig_raw.iter().zip(&spectrum) {
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
        for (pre, raw) in r.eig_precond.iter().zip(&spectrum) {
            assert!((pre - raw).abs() <= 1e-8);
        }
    }

    #[test]
    fn csv_layout() {
        let o = random_oracle(9, 10, 3, Task::Ridge, 0.0);
        let r = sandwich_check(&o, &[0.0; 3], &NystromApprox::empty(3), 1.0, 2, &DiagnosticCaps::default()).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,eig_raw,eig_precond");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }
}
