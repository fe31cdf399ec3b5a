//! Dataset ingestion and preprocessing.
//!
//! Datasets are read from libsvm text (optionally gzip-compressed) and pass
//! through a chain of transforms; each transform appends itself to the
//! dataset's provenance string.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigh_small_capped, DenseMatrix, SeededRng, EIGH_CAP};
use crate::oracles::{DataMatrix, Storage};

/// A data matrix plus a description of where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub matrix: DataMatrix,
    pub provenance: String,
}

impl RawDataset {
    pub fn new(matrix: DataMatrix, provenance: impl Into<String>) -> Self {
        Self {
            matrix,
            provenance: provenance.into(),
        }
    }

    fn derived(&self, matrix: DataMatrix, step: &str) -> Self {
        Self {
            matrix,
            provenance: format!("{} | {step}", self.provenance),
        }
    }
}

/// Parses libsvm text: one `<label> <index>:<value> ...` row per nonempty line,
/// with 1-based, strictly increasing indices. Text after `#` is ignored.
///
/// The feature count is the largest index seen unless `num_features` is given.
pub fn parse_libsvm<R: BufRead>(reader: R, num_features: Option<usize>) -> Result<RawDataset> {
    let mut indptr = vec![0usize];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("nonempty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("invalid label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(err(format!("non-finite label {label_tok:?}")));
        }
        let mut prev = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected index:value, got {tok:?}")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("invalid index in {tok:?}")))?;
            if idx == 0 {
                return Err(err("feature indices are 1-based; found index 0".into()));
            }
            if idx <= prev {
                return Err(err(format!("indices not strictly increasing at {tok:?}")));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("invalid value in {tok:?}")))?;
            if !val.is_finite() {
                return Err(err(format!("non-finite value in {tok:?}")));
            }
            prev = idx;
            indices.push(idx - 1);
            values.push(val);
        }
        max_index = max_index.max(prev);
        labels.push(label);
        indptr.push(indices.len());
    }

    let p = match num_features {
        Some(p) if p < max_index => {
            return Err(Error::Parse {
                line: 0,
                message: format!("feature index {max_index} exceeds declared feature count {p}"),
            })
        }
        Some(p) => p,
        None => max_index,
    };
    let n = labels.len();
    let matrix = DataMatrix::sparse(n, p, indptr, indices, values, labels)?;
    Ok(RawDataset::new(matrix, "libsvm"))
}

/// Reads a libsvm file, transparently decompressing gzip input.
pub fn read_libsvm_path(path: &Path, num_features: Option<usize>) -> Result<RawDataset> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let read = file.read(&mut magic)?;
    drop(file);
    let file = File::open(path)?;
    let mut ds = if read == 2 && magic == [0x1f, 0x8b] {
        parse_libsvm(BufReader::new(GzDecoder::new(file)), num_features)?
    } else {
        parse_libsvm(BufReader::new(file), num_features)?
    };
    ds.provenance = format!("libsvm:{}", path.display());
    Ok(ds)
}

/// Writes libsvm text; floats use shortest round-trip formatting.
pub fn write_libsvm<W: Write>(ds: &DataMatrix, mut out: W) -> Result<()> {
    for i in 0..ds.n() {
        write!(out, "{}", ds.labels()[i])?;
        for (j, a) in ds.row_entries(i) {
            if ds.is_sparse() || a != 0.0 {
                write!(out, " {}:{}", j + 1, a)?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Scales every nonzero row to unit Euclidean norm.
pub fn normalize_rows(ds: &RawDataset) -> RawDataset {
    let m = &ds.matrix;
    let norms: Vec<f64> = (0..m.n()).map(|i| m.row_norm_sq(i).sqrt()).collect();
    let matrix = m.map_rows(|i, row| {
        let nrm = norms[i];
        if nrm > 0.0 {
            row.iter_mut().for_each(|x| *x /= nrm);
        }
    });
    ds.derived(matrix, "normalize_rows")
}

/// Per-feature centering and scaling fitted on one split and applied to others.
///
/// Uses the population (`1/n`) variance; zero-variance features are only centered.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &RawDataset) -> Result<Self> {
        let m = &ds.matrix;
        let (n, p) = (m.n(), m.p());
        if n == 0 {
            return Err(Error::InvalidData("cannot standardize an empty dataset".into()));
        }
        let mut means = vec![0.0; p];
        for i in 0..n {
            for (j, a) in m.row_entries(i) {
                means[j] += a;
            }
        }
        means.iter_mut().for_each(|x| *x /= n as f64);
        // Sparse rows omit zeros, so accumulate squared deviations of the stored
        // entries and add the implicit zeros' contribution afterwards.
        let mut sq = vec![0.0; p];
        let mut stored = vec![0usize; p];
        for i in 0..n {
            for (j, a) in m.row_entries(i) {
                sq[j] += (a - means[j]).powi(2);
                stored[j] += 1;
            }
        }
        let scales = (0..p)
            .map(|j| {
                let implicit = (n - stored[j]) as f64 * means[j] * means[j];
                let var = (sq[j] + implicit) / n as f64;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { means, scales })
    }

    /// Dense standardized copy of `ds`.
    pub fn transform(&self, ds: &RawDataset) -> Result<RawDataset> {
        let m = &ds.matrix;
        if m.p() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                found: m.p(),
            });
        }
        let dense = m.to_dense();
        let matrix = dense.map_rows(|_, row| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.means[j]) / self.scales[j];
            }
        });
        Ok(ds.derived(matrix, "standardize"))
    }
}

/// Standardizes `ds` with statistics computed on `ds` itself.
pub fn standardize(ds: &RawDataset) -> Result<RawDataset> {
    Standardizer::fit(ds)?.transform(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `√(2/D) cos(Wᵀa + b)`, approximating a Gaussian kernel.
    #[serde(alias = "rff")]
    RffCosine,
    /// `max(0, Wᵀa)`.
    Relu,
}

/// Random feature map with weights frozen from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub bandwidth: f64,
    pub seed: u64,
    /// `p × D`
    weights: DenseMatrix,
    offsets: Vec<f64>,
}

impl FeatureMap {
    /// Draws `W` with i.i.d. `N(0, 1/σ²)` entries (cosine) or `N(0, 1/p)`
    /// entries (ReLU), and phases uniform on `[0, 2π)` for the cosine map.
    pub fn new(kind: FeatureKind, input_dim: usize, dim: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if dim == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("feature dimensions must be at least 1".into()));
        }
        if kind == FeatureKind::RffCosine && (!(bandwidth > 0.0) || !bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mut rng = SeededRng::new(seed);
        let scale = match kind {
            FeatureKind::RffCosine => 1.0 / bandwidth,
            FeatureKind::Relu => 1.0 / (input_dim as f64).sqrt(),
        };
        let mut weights = crate::linalg::gaussian_matrix(&mut rng, input_dim, dim);
        weights.scale(scale);
        let offsets = match kind {
            FeatureKind::RffCosine => (0..dim).map(|_| std::f64::consts::TAU * rng.uniform()).collect(),
            FeatureKind::Relu => vec![0.0; dim],
        };
        Ok(Self {
            kind,
            bandwidth,
            seed,
            weights,
            offsets,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Features of a single input vector.
    pub fn features(&self, a: &[f64]) -> Result<Vec<f64>> {
        let proj = self.weights.t_matvec(a)?;
        Ok(self.finish(proj))
    }

    fn finish(&self, mut proj: Vec<f64>) -> Vec<f64> {
        match self.kind {
            FeatureKind::RffCosine => {
                let c = (2.0 / self.dim() as f64).sqrt();
                for (z, b) in proj.iter_mut().zip(&self.offsets) {
                    *z = c * (*z + b).cos();
                }
            }
            FeatureKind::Relu => proj.iter_mut().for_each(|z| *z = z.max(0.0)),
        }
        proj
    }

    /// Dense `n × D` transformed dataset.
    pub fn apply(&self, ds: &RawDataset) -> Result<RawDataset> {
        let m = &ds.matrix;
        if m.p() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: m.p(),
            });
        }
        let d = self.dim();
        let mut values = Vec::with_capacity(m.n() * d);
        let mut proj = vec![0.0; d];
        for i in 0..m.n() {
            proj.iter_mut().for_each(|x| *x = 0.0);
            for (j, a) in m.row_entries(i) {
                if a != 0.0 {
                    for (k, z) in proj.iter_mut().enumerate() {
                        *z += a * self.weights[(j, k)];
                    }
                }
            }
            values.extend(self.finish(proj.clone()));
        }
        let matrix = DataMatrix::dense(m.n(), d, values, m.labels().to_vec())?;
        let step = match self.kind {
            FeatureKind::RffCosine => format!("rff(D={d}, bandwidth={}, seed={})", self.bandwidth, self.seed),
            FeatureKind::Relu => format!("relu_features(D={d}, seed={})", self.seed),
        };
        Ok(ds.derived(matrix, &step))
    }
}

pub fn random_features(ds: &RawDataset, map: &FeatureMap) -> Result<RawDataset> {
    map.apply(ds)
}

/// Random train/test partition of `0..n`; the train side gets
/// `round(fraction · n)` indices (at least one on each side). Both sides are
/// returned in increasing order.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    if n < 2 {
        return Err(Error::InvalidData(format!("cannot split a dataset of {n} samples")));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut SeededRng::new(seed));
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &RawDataset, fraction: f64, seed: u64) -> Result<(RawDataset, RawDataset)> {
    let (train, test) = split_indices(ds.matrix.n(), fraction, seed)?;
    Ok((
        ds.derived(ds.matrix.select_rows(&train), &format!("split(train, {fraction}, seed={seed})")),
        ds.derived(ds.matrix.select_rows(&test), &format!("split(test, {fraction}, seed={seed})")),
    ))
}

/// Lower bound `(σ₁²/n + γ)/(σ_r²/n + γ)` on the condition number of the
/// regularized GLM Hessian.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionBound {
    pub value: f64,
    pub sigma_1: f64,
    pub sigma_r: f64,
    /// Index actually used for `σ_r` (1-based).
    pub r_used: usize,
    /// Set when the data has rank below `r`; the smallest positive singular value
    /// was used instead, so the bound may overstate `σ₁²/σ_r²`.
    pub rank_deficient: bool,
}

/// Singular values come from a dense eigendecomposition of the smaller Gram
/// matrix (`AᵀA` or `AAᵀ`), so `min(n, p)` must not exceed `cap`.
pub fn condition_lower_bound(ds: &DataMatrix, l2: f64, r: usize, cap: usize) -> Result<ConditionBound> {
    let (n, p) = (ds.n(), ds.p());
    if r == 0 || r > n.min(p) {
        return Err(Error::InvalidArgument(format!(
            "rank index r = {r} must lie in 1..={}",
            n.min(p)
        )));
    }
    let m = n.min(p);
    if m > cap.min(EIGH_CAP) {
        return Err(Error::TooLarge {
            what: "Gram matrix for the condition bound",
            size: m,
            cap: cap.min(EIGH_CAP),
        });
    }
    let a = ds.to_dense_matrix();
    let gram = if p <= n { a.t_matmul(&a)? } else { a.matmul(&a.transpose())? };
    let mut eig = eigh_small_capped(&gram, cap.min(EIGH_CAP))?.eigenvalues;
    eig.reverse();
    let top = eig[0].max(0.0);
    let tol = n.max(p) as f64 * f64::EPSILON * top;
    let rank = eig.iter().filter(|&&l| l > tol).count();
    let (r_used, rank_deficient) = if rank < r { (rank.max(1), true) } else { (r, false) };
    let s1 = top;
    let sr = eig[r_used - 1].max(0.0);
    let nf = n as f64;
    Ok(ConditionBound {
        value: (s1 / nf + l2) / (sr / nf + l2),
        sigma_1: s1.sqrt(),
        sigma_r: sr.sqrt(),
        r_used,
        rank_deficient,
    })
}

impl DataMatrix {
    /// True when every stored value is identical to `other`'s and the shapes match.
    pub fn same_structure(&self, other: &DataMatrix) -> bool {
        self.n() == other.n()
            && self.p() == other.p()
            && self.labels() == other.labels()
            && match (self.storage(), other.storage()) {
                (Storage::Dense(a), Storage::Dense(b)) => a == b,
                (
                    Storage::Sparse {
                        indptr: pa,
                        indices: ia,
                        values: va,
                    },
                    Storage::Sparse {
                        indptr: pb,
                        indices: ib,
                        values: vb,
                    },
                ) => pa == pb && ia == ib && va == vb,
                _ => false,
            }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};

    fn dense(rows: &[Vec<f64>]) -> RawDataset {
        let labels = vec![1.0; rows.len()];
        RawDataset::new(DataMatrix::from_rows(rows, labels).unwrap(), "test")
    }

    #[test]
    fn parses_example() {
        let ds = parse_libsvm("1 1:0.5 3:2.0\n-1 2:1.0".as_bytes(), None).unwrap();
        let m = &ds.matrix;
        assert_eq!((m.n(), m.p()), (2, 3));
        assert_eq!(m.row_entries(0).collect::<Vec<_>>(), vec![(0, 0.5), (2, 2.0)]);
        assert_eq!(m.row_entries(1).collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(m.labels(), &[1.0, -1.0]);
    }

    #[test]
    fn parses_empty_stream() {
        let ds = parse_libsvm("".as_bytes(), None).unwrap();
        assert_eq!(ds.matrix.n(), 0);
    }

    #[test]
    fn parse_errors_name_the_line() {
        for (text, line) in [
            ("1 1:0.5\n1 2:1 2:3", 2),
            ("1 0:1.0", 1),
            ("1 1:0.5\n\n+1 3 4:1", 3),
            ("abc 1:1", 1),
            ("1 1:x", 1),
        ] {
            match parse_libsvm(text.as_bytes(), None) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(parse_libsvm("1 5:1".as_bytes(), Some(3)).is_err());
        assert_eq!(parse_libsvm("1 2:1 # note".as_bytes(), Some(6)).unwrap().matrix.p(), 6);
    }

    #[test]
    fn reads_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.svm.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::default());
        enc.write_all(b"1 1:0.5 3:2.0\n-1 2:1.0\n").unwrap();
        enc.finish().unwrap();
        let ds = read_libsvm_path(&path, None).unwrap();
        assert_eq!((ds.matrix.n(), ds.matrix.p()), (2, 3));
    }

    #[test]
    fn normalizes_rows() {
        let ds = normalize_rows(&dense(&[vec![3.0, 4.0], vec![0.0, 0.0]]));
        assert_eq!(ds.matrix.row_entries(0).collect::<Vec<_>>(), vec![(0, 0.6), (1, 0.8)]);
        assert_eq!(ds.matrix.row_entries(1).collect::<Vec<_>>(), vec![(0, 0.0), (1, 0.0)]);
    }

    #[test]
    fn standardizes_small_columns() {
        let ds = standardize(&dense(&[vec![1.0, 5.0], vec![3.0, 5.0]])).unwrap();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| ds.matrix.row_entries(i).map(|(_, a)| a).collect()).collect();
        assert_eq!(rows, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn sparse_standardization_matches_dense() {
        let mut rng = SeededRng::new(4);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..5).map(|_| if rng.uniform() < 0.4 { rng.standard_normal() } else { 0.0 }).collect())
            .collect();
        let d = dense(&rows);
        let s = RawDataset::new(d.matrix.to_sparse(), "s");
        let (a, b) = (Standardizer::fit(&d).unwrap(), Standardizer::fit(&s).unwrap());
        for j in 0..5 {
            assert!((a.means[j] - b.means[j]).abs() < 1e-15);
            assert!((a.scales[j] - b.scales[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn random_features_at_origin() {
        let ds = dense(&[vec![0.0, 0.0, 0.0]]);
        let rff = FeatureMap::new(FeatureKind::RffCosine, 3, 16, 1.0, 7).unwrap();
        let z = rff.apply(&ds).unwrap();
        let c = (2.0f64 / 16.0).sqrt();
        for (k, (_, v)) in z.matrix.row_entries(0).enumerate() {
            assert!((v - c * rff.offsets[k].cos()).abs() < 1e-15);
        }
        let relu = FeatureMap::new(FeatureKind::Relu, 3, 16, 1.0, 7).unwrap();
        assert!(relu.apply(&ds).unwrap().matrix.row_entries(0).all(|(_, v)| v == 0.0));
        assert!(rff.apply(&dense(&[vec![1.0, 2.0]])).is_err());
    }

    #[test]
    fn rff_approximates_gaussian_kernel() {
        let map = FeatureMap::new(FeatureKind::RffCosine, 4, 20_000, 1.0, 3).unwrap();
        let mut rng = SeededRng::new(99);
        let unit = |rng: &mut SeededRng| {
            let v = rng.normal_vec(4);
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let mut errs: Vec<f64> = (0..50)
            .map(|_| {
                let (x, y) = (unit(&mut rng), unit(&mut rng));
                let approx = dot(&map.features(&x).unwrap(), &map.features(&y).unwrap());
                let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
                (approx - (-d2 / 2.0).exp()).abs()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[25] <= 0.02, "median error {}", errs[25]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (a, b) = split_indices(10, 0.8, 5).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 5).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn condition_bound_small_cases() {
        let n = 100;
        let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let b = condition_lower_bound(&DataMatrix::from_rows(&eye, vec![0.0; n]).unwrap(), 0.0, 100, 4096).unwrap();
        assert!((b.value - 1.0).abs() < 1e-12);

        let mut diag = eye.clone();
        diag[0][0] = 10.0;
        let b = condition_lower_bound(&DataMatrix::from_rows(&diag, vec![0.0; n]).unwrap(), 0.0, 2, 4096).unwrap();
        assert!((b.value - 100.0).abs() < 1e-9);
        assert!(!b.rank_deficient);

        let low: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 + 1.0, 0.0, 0.0]).collect();
        let b = condition_lower_bound(&DataMatrix::from_rows(&low, vec![0.0; 6]).unwrap(), 0.0, 3, 4096).unwrap();
        assert!(b.rank_deficient);
        assert_eq!(b.r_used, 1);
        assert!(condition_lower_bound(&DataMatrix::from_rows(&low, vec![0.0; 6]).unwrap(), 0.0, 3, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_sparse(seed: u64, n: usize, p: usize) -> DataMatrix {
            let mut rng = SeededRng::new(seed);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..p).map(|_| if rng.uniform() < 0.3 { rng.standard_normal() * 10f64.powf(rng.uniform() * 8.0 - 4.0) } else { 0.0 }).collect())
                .collect();
            let labels = (0..n).map(|_| rng.standard_normal()).collect();
            DataMatrix::dense(n, p, rows.concat(), labels).unwrap().to_sparse()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn libsvm_roundtrip(seed in any::<u64>(), n in 0usize..20, p in 1usize..12) {
                let m = random_sparse(seed, n, p);
                let mut buf = Vec::new();
                write_libsvm(&m, &mut buf).unwrap();
                let back = parse_libsvm(buf.as_slice(), Some(p)).unwrap();
                prop_assert!(back.matrix.same_structure(&m));
            }

            #[test]
            fn normalize_is_unit_and_idempotent(seed in any::<u64>()) {
                let ds = RawDataset::new(random_sparse(seed, 15, 6), "p");
                let once = normalize_rows(&ds);
                for i in 0..15 {
                    let nrm = once.matrix.row_norm_sq(i).sqrt();
                    prop_assert!(nrm == 0.0 || (nrm - 1.0).abs() <= 1e-12);
                }
                let twice = normalize_rows(&once);
                for i in 0..15 {
                    for ((_, a), (_, b)) in once.matrix.row_entries(i).zip(twice.matrix.row_entries(i)) {
                        prop_assert!((a - b).abs() <= 1e-15);
                    }
                }
            }

            #[test]
            fn standardized_columns(seed in any::<u64>()) {
                let mut rng = SeededRng::new(seed);
                let rows: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|j| 3.0 * rng.standard_normal() + j as f64).collect()).collect();
                let ds = RawDataset::new(DataMatrix::from_rows(&rows, vec![0.0; 25]).unwrap(), "p");
                let st = standardize(&ds).unwrap();
                let fit = Standardizer::fit(&st).unwrap();
                for j in 0..4 {
                    prop_assert!(fit.means[j].abs() <= 1e-12);
                    prop_assert!((fit.scales[j].powi(2) - 1.0).abs() <= 1e-10);
                }
                let again = standardize(&st).unwrap();
                for i in 0..25 {
                    for ((_, a), (_, b)) in st.matrix.row_entries(i).zip(again.matrix.row_entries(i)) {
                        prop_assert!((a - b).abs() <= 1e-10);
                    }
                }
            }

            #[test]
            fn features_depend_only_on_seed(seed in any::<u64>(), relu in any::<bool>()) {
                let kind = if relu { FeatureKind::Relu } else { FeatureKind::RffCosine };
                let ds = RawDataset::new(random_sparse(seed, 6, 5), "p");
                let a = FeatureMap::new(kind, 5, 8, 1.0, seed).unwrap().apply(&ds).unwrap();
                let b = FeatureMap::new(kind, 5, 8, 1.0, seed).unwrap().apply(&ds).unwrap();
                prop_assert!(a.matrix.same_structure(&b.matrix));
            }
        }
    }
}
