//! Finite-sum GLM oracles: ridge and l2-regularized logistic regression.
//!
//! The objective is `f(w) = (1/n) Σ fᵢ(w) + (γ/2)‖w‖²` with
//! `fᵢ(w) = ½(aᵢᵀw − bᵢ)²` (ridge) or `log(1 + exp(−yᵢ aᵢᵀw))` (logistic).
//! Gradients include the `γw` term; Hessian-vector products do not, so the
//! sketched curvature is that of the data term alone.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, DenseMatrix, SeededRng};

/// Row storage of a [`DataMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    /// Row-major `n × p` values.
    Dense(Vec<f64>),
    /// Compressed sparse rows.
    Sparse {
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    },
}

/// Sample matrix with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    n: usize,
    p: usize,
    storage: Storage,
    labels: Vec<f64>,
}

impl DataMatrix {
    pub fn dense(n: usize, p: usize, values: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if values.len() != n * p {
            return Err(Error::DimensionMismatch {
                expected: n * p,
                found: values.len(),
            });
        }
        let m = Self {
            n,
            p,
            storage: Storage::Dense(values),
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn sparse(
        n: usize,
        p: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != n + 1 || indptr[0] != 0 {
            return Err(Error::InvalidData(format!(
                "row pointer array must have length {} and start at 0",
                n + 1
            )));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(Error::InvalidData(
                "row pointers, indices and values disagree in length".into(),
            ));
        }
        for i in 0..n {
            let (lo, hi) = (indptr[i], indptr[i + 1]);
            if lo > hi {
                return Err(Error::InvalidData(format!("row {i}: decreasing row pointer")));
            }
            let row = &indices[lo..hi];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidData(format!(
                    "row {i}: column indices not strictly increasing"
                )));
            }
            if row.last().is_some_and(|&c| c >= p) {
                return Err(Error::InvalidData(format!("row {i}: column index out of range")));
            }
        }
        let m = Self {
            n,
            p,
            storage: Storage::Sparse {
                indptr,
                indices,
                values,
            },
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    /// Dense data from a list of rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n * p);
        for row in rows {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::dense(n, p, values, labels)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: self.labels.len(),
            });
        }
        let values = match &self.storage {
            Storage::Dense(v) => v,
            Storage::Sparse { values, .. } => values,
        };
        if values.iter().chain(&self.labels).any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("non-finite value or label".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse { .. })
    }

    /// Stored entries of row `i` as `(column, value)` pairs (dense rows yield every column).
    pub fn row_entries(&self, i: usize) -> Box<dyn Iterator<Item = (usize, f64)> + '_> {
        match &self.storage {
            Storage::Dense(v) => Box::new(v[i * self.p..(i + 1) * self.p].iter().copied().enumerate()),
            Storage::Sparse {
                indptr,
                indices,
                values,
            } => {
                let (lo, hi) = (indptr[i], indptr[i + 1]);
                Box::new(indices[lo..hi].iter().copied().zip(values[lo..hi].iter().copied()))
            }
        }
    }

    /// `aᵢᵀ v`
    #[inline]
    pub fn row_dot(&self, i: usize, v: &[f64]) -> f64 {
        match &self.storage {
            Storage::Dense(x) => dot(&x[i * self.p..(i + 1) * self.p], v),
            Storage::Sparse {
                indptr,
                indices,
                values,
            } => {
                let (lo, hi) = (indptr[i], indptr[i + 1]);
                indices[lo..hi]
                    .iter()
                    .zip(&values[lo..hi])
                    .map(|(&j, &a)| a * v[j])
                    .sum()
            }
        }
    }

    /// `out += alpha · aᵢ`
    #[inline]
    pub fn row_axpy(&self, i: usize, alpha: f64, out: &mut [f64]) {
        match &self.storage {
            Storage::Dense(x) => axpy(alpha, &x[i * self.p..(i + 1) * self.p], out),
            Storage::Sparse {
                indptr,
                indices,
                values,
            } => {
                let (lo, hi) = (indptr[i], indptr[i + 1]);
                for (&j, &a) in indices[lo..hi].iter().zip(&values[lo..hi]) {
                    out[j] += alpha * a;
                }
            }
        }
    }

    pub fn row_norm_sq(&self, i: usize) -> f64 {
        self.row_entries(i).map(|(_, a)| a * a).sum()
    }

    /// Maps every stored value; structure and labels are kept.
    pub fn map_rows(&self, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut out = self.clone();
        match &mut out.storage {
            Storage::Dense(v) => {
                for i in 0..self.n {
                    f(i, &mut v[i * self.p..(i + 1) * self.p]);
                }
            }
            Storage::Sparse { indptr, values, .. } => {
                for i in 0..self.n {
                    f(i, &mut values[indptr[i]..indptr[i + 1]]);
                }
            }
        }
        out
    }

    /// `n × p` dense copy of the sample matrix (labels dropped).
    pub fn to_dense_matrix(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.p);
        for i in 0..self.n {
            for (j, a) in self.row_entries(i) {
                m[(i, j)] = a;
            }
        }
        m
    }

    pub fn to_dense(&self) -> Self {
        let mut values = vec![0.0; self.n * self.p];
        for i in 0..self.n {
            for (j, a) in self.row_entries(i) {
                values[i * self.p + j] = a;
            }
        }
        Self {
            n: self.n,
            p: self.p,
            storage: Storage::Dense(values),
            labels: self.labels.clone(),
        }
    }

    /// Sparse copy keeping only nonzero entries.
    pub fn to_sparse(&self) -> Self {
        let mut indptr = Vec::with_capacity(self.n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..self.n {
            for (j, a) in self.row_entries(i) {
                if a != 0.0 {
                    indices.push(j);
                    values.push(a);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n: self.n,
            p: self.p,
            storage: Storage::Sparse {
                indptr,
                indices,
                values,
            },
            labels: self.labels.clone(),
        }
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let storage = match &self.storage {
            Storage::Dense(v) => {
                let mut out = Vec::with_capacity(idx.len() * self.p);
                for &i in idx {
                    out.extend_from_slice(&v[i * self.p..(i + 1) * self.p]);
                }
                Storage::Dense(out)
            }
            Storage::Sparse {
                indptr,
                indices,
                values,
            } => {
                let mut new_ptr = vec![0];
                let mut new_idx = Vec::new();
                let mut new_val = Vec::new();
                for &i in idx {
                    new_idx.extend_from_slice(&indices[indptr[i]..indptr[i + 1]]);
                    new_val.extend_from_slice(&values[indptr[i]..indptr[i + 1]]);
                    new_ptr.push(new_idx.len());
                }
                Storage::Sparse {
                    indptr: new_ptr,
                    indices: new_idx,
                    values: new_val,
                }
            }
        };
        Self {
            n: idx.len(),
            p: self.p,
            storage,
            labels,
        }
    }

    /// Same matrix with a wider feature space (extra all-zero columns).
    pub fn with_feature_count(mut self, p: usize) -> Result<Self> {
        if p < self.p {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink feature count from {} to {p}",
                self.p
            )));
        }
        match &mut self.storage {
            Storage::Sparse { .. } => self.p = p,
            Storage::Dense(v) => {
                let old = self.p;
                let mut out = Vec::with_capacity(self.n * p);
                for i in 0..self.n {
                    out.extend_from_slice(&v[i * old..(i + 1) * old]);
                    out.extend(std::iter::repeat_n(0.0, p - old));
                }
                *v = out;
                self.p = p;
            }
        }
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        self.labels = labels;
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ridge,
    Logistic,
}

/// Uniformly sampled subset of sample indices, without replacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    indices: Vec<usize>,
}

impl Batch {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate index in batch".into()));
        }
        if indices.last().is_some_and(|&i| i >= n) {
            return Err(Error::InvalidArgument("batch index out of range".into()));
        }
        Ok(Self { indices })
    }

    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws batches by partial Fisher–Yates shuffles of a persistent index pool.
///
/// Any permutation of the pool is a valid starting point, so each draw is a
/// uniformly random subset regardless of earlier draws.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            pool: (0..n).collect(),
        }
    }

    pub fn draw(&mut self, rng: &mut SeededRng, b: usize) -> Result<Batch> {
        let n = self.pool.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if b > n {
            return Err(Error::BatchTooLarge { batch: b, n });
        }
        let (chosen, _) = self.pool.partial_shuffle(rng, b);
        let mut indices = chosen.to_vec();
        indices.sort_unstable();
        Ok(Batch { indices })
    }
}

/// Uniformly random `b`-subset of `0..n`.
pub fn sample_batch(rng: &mut SeededRng, n: usize, b: usize) -> Result<Batch> {
    BatchSampler::new(n).draw(rng, b)
}

/// `log(1 + exp(t))` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic sigmoid without overflow.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Loss, gradient and Hessian-vector-product oracle for a GLM objective.
#[derive(Clone, Debug)]
pub struct ProblemOracle {
    data: DataMatrix,
    task: Task,
    l2: f64,
}

impl ProblemOracle {
    pub fn new(data: DataMatrix, task: Task, l2: f64) -> Result<Self> {
        if !(l2 >= 0.0) || !l2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "l2 regularization must be finite and nonnegative, got {l2}"
            )));
        }
        if task == Task::Logistic && data.labels().iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidData(
                "logistic regression needs labels in {-1, +1}".into(),
            ));
        }
        Ok(Self { data, task, l2 })
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn n(&self) -> usize {
        self.data.n
    }

    pub fn p(&self) -> usize {
        self.data.p
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.data.p {
            return Err(Error::DimensionMismatch {
                expected: self.data.p,
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `fᵢ` as a function of the margin `z = aᵢᵀw`.
    #[inline]
    pub fn sample_loss(&self, i: usize, z: f64) -> f64 {
        let y = self.data.labels[i];
        match self.task {
            Task::Ridge => 0.5 * (z - y) * (z - y),
            Task::Logistic => softplus(-y * z),
        }
    }

    /// `dfᵢ/dz`.
    #[inline]
    pub fn sample_slope(&self, i: usize, z: f64) -> f64 {
        let y = self.data.labels[i];
        match self.task {
            Task::Ridge => z - y,
            Task::Logistic => -y * sigmoid(-y * z),
        }
    }

    /// `d²fᵢ/dz²`, the weight `dᵢ` in `∇²fᵢ = dᵢ aᵢaᵢᵀ`.
    #[inline]
    pub fn sample_curvature(&self, i: usize, z: f64) -> f64 {
        match self.task {
            Task::Ridge => 1.0,
            Task::Logistic => {
                let s = sigmoid(self.data.labels[i] * z);
                s * (1.0 - s)
            }
        }
    }

    /// Curvature weights `dᵢ(w)` for every sample.
    pub fn curvatures(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        Ok((0..self.n())
            .map(|i| self.sample_curvature(i, self.data.row_dot(i, w)))
            .collect())
    }

    /// Unregularized mean loss `(1/n) Σ fᵢ(w)`.
    pub fn data_loss(&self, w: &[f64]) -> Result<f64> {
        self.check_dim(w)?;
        if self.n() == 0 {
            return Ok(0.0);
        }
        let total: f64 = (0..self.n())
            .map(|i| self.sample_loss(i, self.data.row_dot(i, w)))
            .sum();
        Ok(total / self.n() as f64)
    }

    /// Full objective including `(γ/2)‖w‖²`.
    pub fn full_loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.data_loss(w)? + 0.5 * self.l2 * dot(w, w))
    }

    /// Loss of the minibatch objective `(1/|B|) Σ_{i∈B} fᵢ + (γ/2)‖w‖²`.
    pub fn batch_loss(&self, w: &[f64], batch: &Batch) -> Result<f64> {
        self.check_dim(w)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let total: f64 = batch
            .indices
            .iter()
            .map(|&i| self.sample_loss(i, self.data.row_dot(i, w)))
            .sum();
        Ok(total / batch.len() as f64 + 0.5 * self.l2 * dot(w, w))
    }

    /// `(1/|B|) Σ_{i∈B} ∇fᵢ(w) + γw`.
    pub fn minibatch_gradient(&self, w: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut g = vec![0.0; self.p()];
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch.indices {
            let slope = self.sample_slope(i, self.data.row_dot(i, w));
            if slope != 0.0 {
                self.data.row_axpy(i, scale * slope, &mut g);
            }
        }
        if self.l2 != 0.0 {
            axpy(self.l2, w, &mut g);
        }
        Ok(g)
    }

    pub fn full_gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.minibatch_gradient(w, &Batch::full(self.n()))
    }

    /// `(1/|S|) Σ_{i∈S} dᵢ(w) aᵢ(aᵢᵀv)`; the l2 term is not included.
    pub fn minibatch_hvp(&self, w: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        self.check_dim(v)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut out = vec![0.0; self.p()];
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch.indices {
            let d = self.sample_curvature(i, self.data.row_dot(i, w));
            let av = self.data.row_dot(i, v);
            if d * av != 0.0 {
                self.data.row_axpy(i, scale * d * av, &mut out);
            }
        }
        Ok(out)
    }

    /// Curvature weights of a batch, for repeated HVPs at a fixed `w`.
    pub fn batch_curvatures(&self, w: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        Ok(batch
            .indices
            .iter()
            .map(|&i| self.sample_curvature(i, self.data.row_dot(i, w)))
            .collect())
    }

    /// HVP with precomputed curvature weights from [`Self::batch_curvatures`].
    pub fn hvp_with_curvatures(&self, batch: &Batch, curvatures: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p()];
        let scale = 1.0 / batch.len() as f64;
        for (&i, &d) in batch.indices.iter().zip(curvatures) {
            let av = self.data.row_dot(i, v);
            if d * av != 0.0 {
                self.data.row_axpy(i, scale * d * av, &mut out);
            }
        }
        out
    }

    /// Blocked HVP `H_S(w) Q` for every column of `q`, in one pass over the batch rows.
    pub fn minibatch_hvp_block(&self, w: &[f64], batch: &Batch, q: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_dim(w)?;
        if q.rows() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                found: q.rows(),
            });
        }
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let r = q.cols();
        let mut out = DenseMatrix::zeros(self.p(), r);
        let scale = 1.0 / batch.len() as f64;
        let mut proj = vec![0.0; r];
        for &i in &batch.indices {
            let d = self.sample_curvature(i, self.data.row_dot(i, w));
            if d == 0.0 {
                continue;
            }
            proj.iter_mut().for_each(|x| *x = 0.0);
            for (j, a) in self.data.row_entries(i) {
                for (k, pk) in proj.iter_mut().enumerate() {
                    *pk += a * q[(j, k)];
                }
            }
            for (k, &pk) in proj.iter().enumerate() {
                if pk != 0.0 {
                    self.data.row_axpy(i, scale * d * pk, out.col_mut(k));
                }
            }
        }
        Ok(out)
    }

    /// Upper bound on the smoothness constant of `f`, including `γ`.
    pub fn smoothness_upper_bound(&self) -> f64 {
        if self.n() == 0 {
            return self.l2;
        }
        let mean_sq = (0..self.n()).map(|i| self.data.row_norm_sq(i)).sum::<f64>() / self.n() as f64;
        let factor = match self.task {
            Task::Ridge => 1.0,
            Task::Logistic => 0.25,
        };
        factor * mean_sq + self.l2
    }

    /// Fraction of samples with `sign(aᵢᵀw) = yᵢ` (zero margins count as +1).
    /// `None` for regression.
    pub fn accuracy(&self, w: &[f64]) -> Result<Option<f64>> {
        self.check_dim(w)?;
        if self.task != Task::Logistic {
            return Ok(None);
        }
        if self.n() == 0 {
            return Ok(Some(0.0));
        }
        let correct = (0..self.n())
            .filter(|&i| {
                let pred = if self.data.row_dot(i, w) >= 0.0 { 1.0 } else { -1.0 };
                pred == self.data.labels[i]
            })
            .count();
        Ok(Some(correct as f64 / self.n() as f64))
    }

    /// Same task and `γ` over different data.
    pub fn with_data(&self, data: DataMatrix) -> Result<Self> {
        Self::new(data, self.task, self.l2)
    }
}
