//! Synthetic least-squares problems with a prescribed Hessian spectrum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, qr_econ, DenseMatrix, SeededRng};
use crate::oracles::DataMatrix;

/// Shape of the eigenvalues of `AᵀA/n`, largest first and normalized to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumShape {
    /// Log-spaced from 1 down to `1/condition`.
    Geometric { condition: f64 },
    /// `i^{-exponent}`, `i = 1..p`.
    Polynomial { exponent: f64 },
    /// All ones (identity Hessian).
    Flat,
    /// Explicit values, used as given.
    Explicit { values: Vec<f64> },
}

impl SpectrumShape {
    pub fn eigenvalues(&self, p: usize) -> Result<Vec<f64>> {
        let values = match self {
            SpectrumShape::Geometric { condition } => {
                if !(*condition >= 1.0) {
                    return Err(Error::InvalidArgument(format!("condition must be >= 1, got {condition}")));
                }
                (0..p)
                    .map(|i| {
                        let t = if p > 1 { i as f64 / (p - 1) as f64 } else { 0.0 };
                        condition.powf(-t)
                    })
                    .collect()
            }
            SpectrumShape::Polynomial { exponent } => (0..p).map(|i| (1.0 + i as f64).powf(-exponent)).collect(),
            SpectrumShape::Flat => vec![1.0; p],
            SpectrumShape::Explicit { values } => {
                if values.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        found: values.len(),
                    });
                }
                values.clone()
            }
        };
        if values.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("spectrum must be finite and nonnegative".into()));
        }
        Ok(values)
    }
}

/// Planted least-squares instance `b = A w★` with `eig(AᵀA/n)` equal to `spectrum`.
#[derive(Clone, Debug)]
pub struct PlantedProblem {
    pub data: DataMatrix,
    pub w_star: Vec<f64>,
    pub spectrum: Vec<f64>,
}

/// Builds `A = U diag(√(nλ)) Vᵀ` from random orthonormal `U` (`n × p`) and `V`
/// (`p × p`), and a Gaussian `w★`. Labels are the noiseless responses `Aw★`.
pub fn planted_least_squares(n: usize, p: usize, spectrum: &[f64], seed: u64) -> Result<PlantedProblem> {
    if n < p || p == 0 {
        return Err(Error::InvalidArgument(format!(
            "planted problems need n >= p >= 1, got n = {n}, p = {p}"
        )));
    }
    if spectrum.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: spectrum.len(),
        });
    }
    let mut rng = SeededRng::new(seed);
    let u = qr_econ(&gaussian_matrix(&mut rng, n, p))?;
    let v = qr_econ(&gaussian_matrix(&mut rng, p, p))?;
    let mut us = u;
    for (j, &lambda) in spectrum.iter().enumerate() {
        let s = (n as f64 * lambda).sqrt();
        us.col_mut(j).iter_mut().for_each(|x| *x *= s);
    }
    let a: DenseMatrix = us.matmul(&v.transpose())?;
    let w_star = rng.normal_vec(p);
    let b = a.matvec(&w_star)?;
    let mut values = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            values.push(a[(i, j)]);
        }
    }
    Ok(PlantedProblem {
        data: DataMatrix::dense(n, p, values, b)?,
        w_star,
        spectrum: spectrum.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigh_small;

    #[test]
    fn planted_spectrum_is_reproduced() {
        let spectrum = SpectrumShape::Geometric { condition: 100.0 }.eigenvalues(8).unwrap();
        let prob = planted_least_squares(50, 8, &spectrum, 1).unwrap();
        let a = prob.data.to_dense_matrix();
        let mut h = a.t_matmul(&a).unwrap();
        h.scale(1.0 / 50.0);
        let mut eig = eigh_small(&h).unwrap().eigenvalues;
        eig.reverse();
        for (got, want) in eig.iter().zip(&spectrum) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let resid: Vec<f64> = (0..50)
            .map(|i| prob.data.row_dot(i, &prob.w_star) - prob.data.labels()[i])
            .collect();
        assert!(resid.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn shapes() {
        assert_eq!(SpectrumShape::Flat.eigenvalues(3).unwrap(), vec![1.0; 3]);
        let g = SpectrumShape::Geometric { condition: 1e4 }.eigenvalues(5).unwrap();
        assert!((g[4] - 1e-4).abs() < 1e-18);
        assert!(SpectrumShape::Geometric { condition: 0.5 }.eigenvalues(2).is_err());
        let json = r#"{"shape": "polynomial", "exponent": 2.0}"#;
        let s: SpectrumShape = serde_json::from_str(json).unwrap();
        assert_eq!(s.eigenvalues(2).unwrap(), vec![1.0, 0.25]);
    }
}
