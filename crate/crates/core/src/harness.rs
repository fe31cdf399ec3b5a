//! JSON-configured experiment driver: load and transform a dataset, run
//! optimizers over seeds, and write metrics CSVs, a manifest and spectrum reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{read_libsvm_path, FeatureKind, FeatureMap, RawDataset, Standardizer};
use crate::diagnostics::{
    conditioning_report, effective_dimension, rho_dissimilarity, write_spectrum_csv, ConditioningConfig,
    DiagnosticCaps, EffectiveDimension, SpectrumReport,
};
use crate::error::{Error, Result};
use crate::optimizer::{
    resolve_baseline, resolve_config, sgd_run, sketchysgd_run, sketchysgd_theoretical_run, svrg_run, Auto,
    BaselineConfig, EvalSchedule, Evaluation, MetricsRecord, RunOutput, SketchyConfig, StepRule,
};
use crate::oracles::{DataMatrix, ProblemOracle, Task};
use crate::synthetic::{planted_least_squares, SpectrumShape};

/// Environment variable holding the worker-thread count for parallel jobs.
pub const THREADS_ENV: &str = "SKETCHYSGD_THREADS";

pub const CSV_HEADER: &str = "pass,wall_seconds,train_loss,test_loss,train_acc,test_acc";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// libsvm file, relative paths resolved against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_features: Option<usize>,
    /// Planted least-squares instance used instead of a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Libsvm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub spectrum: SpectrumShape,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preprocess {
    NormalizeRows,
    /// Statistics come from the training split when applied after a split.
    Standardize,
    RandomFeatures {
        kind: FeatureKind,
        dim: usize,
        #[serde(default = "one")]
        bandwidth: f64,
        #[serde(default)]
        seed: u64,
    },
    Split {
        fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerName {
    #[serde(rename = "sketchysgd")]
    SketchySgd,
    #[serde(rename = "sketchysgd-theoretical")]
    SketchySgdTheoretical,
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "svrg")]
    Svrg,
}

impl OptimizerName {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerName::SketchySgd => "sketchysgd",
            OptimizerName::SketchySgdTheoretical => "sketchysgd-theoretical",
            OptimizerName::Sgd => "sgd",
            OptimizerName::Svrg => "svrg",
        }
    }
}

/// One optimizer entry. `params` holds the optimizer's hyperparameters; the
/// `seed` and `max_passes` fields in it are overridden by the run-level values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub name: OptimizerName,
    /// Output file stem; defaults to the name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "empty_object")]
    pub params: Value,
}

fn empty_object() -> Value {
    json!({})
}

impl OptimizerSpec {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.name.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSpec {
    #[serde(default = "default_diag_rank")]
    pub rank: usize,
    /// `auto` is `10⁻³·L̂`.
    #[serde(default)]
    pub rho: Auto<f64>,
    /// `auto` sketches the full Hessian.
    #[serde(default)]
    pub hessian_batch: Auto<usize>,
    #[serde(default = "default_top_m")]
    pub top_m: usize,
    #[serde(default)]
    pub seed: u64,
    /// Levels at which to report the effective dimension of `H`; ρ is always included.
    #[serde(default)]
    pub betas: Vec<f64>,
    /// Also compute the ρ-dissimilarity.
    #[serde(default = "yes")]
    pub dissimilarity: bool,
    #[serde(default)]
    pub caps: DiagnosticCaps,
    /// Iterates file written by a previous `run` with `save_iterates`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterates: Option<PathBuf>,
    /// Pass counts at which to analyze saved iterates (nearest saved record).
    #[serde(default)]
    pub checkpoints: Vec<f64>,
}

fn default_diag_rank() -> usize {
    10
}
fn default_top_m() -> usize {
    100
}
fn yes() -> bool {
    true
}

impl Default for DiagnoseSpec {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub task: Task,
    #[serde(default)]
    pub preprocessing: Vec<Preprocess>,
    /// `auto` is `10⁻²/n_train`.
    #[serde(default)]
    pub l2: Auto<f64>,
    pub optimizers: Vec<OptimizerSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_passes")]
    pub max_passes: f64,
    /// Evaluation cadence in passes; 0 evaluates after every iteration.
    #[serde(default = "one")]
    pub eval_every: f64,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub save_iterates: bool,
    #[serde(default)]
    pub diagnose: DiagnoseSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_passes() -> f64 {
    40.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub max_passes: Option<f64>,
    pub seed: Option<u64>,
}

/// A config file parsed, overridden and checked.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory against which relative dataset paths resolve.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.config.dataset.path.as_ref().map(|p| self.base_dir.join(p))
    }
}

/// Reads a config, applies overrides and validates it, reporting every problem found.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    match &overrides.output_dir {
        Some(dir) => config.output_dir = dir.clone(),
        None => config.output_dir = base_dir.join(&config.output_dir),
    }
    if let Some(m) = overrides.max_passes {
        config.max_passes = m;
    }
    if let Some(s) = overrides.seed {
        config.seeds = vec![s];
    }
    let loaded = LoadedConfig { config, base_dir };
    let problems = validate(&loaded);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("\n")));
    }
    Ok(loaded)
}

/// Schema and file-existence checks beyond what deserialization enforces.
pub fn validate(loaded: &LoadedConfig) -> Vec<String> {
    let c = &loaded.config;
    let mut problems = Vec::new();
    match (&c.dataset.path, &c.dataset.synthetic) {
        (None, None) => problems.push("dataset.path: missing (or give dataset.synthetic)".to_string()),
        (Some(_), Some(_)) => problems.push("dataset: give either path or synthetic, not both".to_string()),
        (Some(_), None) => {
            let p = loaded.dataset_path().expect("path present");
            if !p.is_file() {
                problems.push(format!("dataset.path: file not found: {}", p.display()));
            }
        }
        (None, Some(s)) => {
            if s.p == 0 || s.n < s.p {
                problems.push(format!("dataset.synthetic: need n >= p >= 1, got n = {}, p = {}", s.n, s.p));
            }
            if let Err(e) = s.spectrum.eigenvalues(s.p) {
                problems.push(format!("dataset.synthetic.spectrum: {e}"));
            }
        }
    }
    let mut splits = 0;
    for (i, step) in c.preprocessing.iter().enumerate() {
        match step {
            Preprocess::Split { fraction, .. } => {
                splits += 1;
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    problems.push(format!("preprocessing[{i}].fraction: must lie in (0, 1), got {fraction}"));
                }
            }
            Preprocess::RandomFeatures { dim, bandwidth, .. } => {
                if *dim == 0 {
                    problems.push(format!("preprocessing[{i}].dim: must be at least 1"));
                }
                if !(*bandwidth > 0.0) {
                    problems.push(format!("preprocessing[{i}].bandwidth: must be positive, got {bandwidth}"));
                }
            }
            _ => {}
        }
    }
    if splits > 1 {
        problems.push("preprocessing: at most one split step is allowed".to_string());
    }
    if let Auto::Value(l2) = c.l2 {
        if !(l2 >= 0.0) || !l2.is_finite() {
            problems.push(format!("l2: must be nonnegative, got {l2}"));
        }
    }
    if c.optimizers.is_empty() {
        problems.push("optimizers: at least one optimizer is required".to_string());
    }
    let mut labels = std::collections::HashSet::new();
    for (i, spec) in c.optimizers.iter().enumerate() {
        if !labels.insert(spec.label().to_string()) {
            problems.push(format!("optimizers[{i}].label: duplicate label {:?}", spec.label()));
        }
        if let Err(e) = parse_params(spec) {
            problems.push(format!("optimizers[{i}].params: {e}"));
        }
    }
    if c.seeds.is_empty() {
        problems.push("seeds: at least one seed is required".to_string());
    }
    if !(c.max_passes >= 0.0) || !c.max_passes.is_finite() {
        problems.push(format!("max_passes: must be nonnegative, got {}", c.max_passes));
    }
    if !(c.eval_every >= 0.0) || !c.eval_every.is_finite() {
        problems.push(format!("eval_every: must be nonnegative, got {}", c.eval_every));
    }
    let d = &c.diagnose;
    if d.rank == 0 {
        problems.push("diagnose.rank: must be at least 1".to_string());
    }
    if d.betas.iter().any(|b| !(*b > 0.0)) {
        problems.push("diagnose.betas: every beta must be positive".to_string());
    }
    if let Some(p) = &d.iterates {
        if !loaded.base_dir.join(p).is_file() {
            problems.push(format!("diagnose.iterates: file not found: {}", p.display()));
        }
    } else if !d.checkpoints.is_empty() {
        problems.push("diagnose.checkpoints: requires diagnose.iterates".to_string());
    }
    problems
}

enum Params {
    Sketchy(SketchyConfig),
    Baseline(BaselineConfig),
}

fn parse_params(spec: &OptimizerSpec) -> Result<Params> {
    let params = match spec.name {
        OptimizerName::SketchySgd | OptimizerName::SketchySgdTheoretical => {
            let cfg: SketchyConfig = serde_json::from_value(spec.params.clone())?;
            if spec.name == OptimizerName::SketchySgdTheoretical && cfg.lr == StepRule::Adaptive {
                return Err(Error::Config(
                    "sketchysgd-theoretical needs lr = \"frozen\" or a number".into(),
                ));
            }
            Params::Sketchy(cfg)
        }
        OptimizerName::Sgd | OptimizerName::Svrg => Params::Baseline(serde_json::from_value(spec.params.clone())?),
    };
    Ok(params)
}

/// Training (and optional test) problems built from a config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: ProblemOracle,
    pub test: Option<ProblemOracle>,
    pub provenance: String,
    /// SHA-256 of the source file, when the data came from one.
    pub source_sha256: Option<String>,
    /// SHA-256 of the processed training matrix and labels.
    pub train_sha256: String,
}

fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    Sha256::digest(bytes.as_ref()).iter().map(|b| format!("{b:02x}")).collect()
}

fn matrix_digest(m: &DataMatrix) -> String {
    let mut h = Sha256::new();
    h.update((m.n() as u64).to_le_bytes());
    h.update((m.p() as u64).to_le_bytes());
    for i in 0..m.n() {
        h.update(m.labels()[i].to_le_bytes());
        for (j, a) in m.row_entries(i) {
            if a != 0.0 {
                h.update((j as u64).to_le_bytes());
                h.update(a.to_le_bytes());
            }
        }
        h.update(u64::MAX.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Logistic labels must be ±1; a two-valued label column is mapped
/// smaller → −1, larger → +1.
fn binarize_labels(m: DataMatrix) -> Result<DataMatrix> {
    let mut values: Vec<f64> = m.labels().to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.iter().all(|&y| y == 1.0 || y == -1.0) {
        return Ok(m);
    }
    if values.len() != 2 {
        return Err(Error::InvalidData(format!(
            "logistic regression needs two label values, found {}",
            values.len()
        )));
    }
    log::info!("mapping labels {} -> -1 and {} -> +1", values[0], values[1]);
    let labels = m.labels().iter().map(|&y| if y == values[0] { -1.0 } else { 1.0 }).collect();
    m.with_labels(labels)
}

pub fn prepare(loaded: &LoadedConfig) -> Result<Prepared> {
    let c = &loaded.config;
    let (raw, source_sha256) = if let Some(path) = loaded.dataset_path() {
        let bytes = fs::read(&path)?;
        (read_libsvm_path(&path, c.dataset.num_features)?, Some(sha256_hex(bytes)))
    } else {
        let s = c.dataset.synthetic.as_ref().ok_or_else(|| Error::Config("dataset.path: missing".into()))?;
        let prob = planted_least_squares(s.n, s.p, &s.spectrum.eigenvalues(s.p)?, s.seed)?;
        let mut m = prob.data;
        if c.task == Task::Logistic {
            let labels = m.labels().iter().map(|&y| if y >= 0.0 { 1.0 } else { -1.0 }).collect();
            m = m.with_labels(labels)?;
        }
        (RawDataset::new(m, format!("synthetic(n={}, p={}, seed={})", s.n, s.p, s.seed)), None)
    };

    let mut train = raw;
    let mut test: Option<RawDataset> = None;
    for step in &c.preprocessing {
        match step {
            Preprocess::NormalizeRows => {
                train = crate::data::normalize_rows(&train);
                test = test.map(|t| crate::data::normalize_rows(&t));
            }
            Preprocess::Standardize => {
                let st = Standardizer::fit(&train)?;
                train = st.transform(&train)?;
                test = test.map(|t| st.transform(&t)).transpose()?;
            }
            Preprocess::RandomFeatures {
                kind,
                dim,
                bandwidth,
                seed,
            } => {
                let map = FeatureMap::new(*kind, train.matrix.p(), *dim, *bandwidth, *seed)?;
                train = map.apply(&train)?;
                test = test.map(|t| map.apply(&t)).transpose()?;
            }
            Preprocess::Split { fraction, seed } => {
                let (a, b) = crate::data::split(&train, *fraction, *seed)?;
                train = a;
                test = Some(b);
            }
        }
    }

    let n_train = train.matrix.n();
    if n_train == 0 {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    let l2 = match c.l2 {
        Auto::Auto => 1e-2 / n_train as f64,
        Auto::Value(g) => g,
    };
    let fix = |m: DataMatrix| if c.task == Task::Logistic { binarize_labels(m) } else { Ok(m) };
    let train_sha256 = matrix_digest(&train.matrix);
    let train_oracle = ProblemOracle::new(fix(train.matrix)?, c.task, l2)?;
    let test_oracle = test.map(|t| ProblemOracle::new(fix(t.matrix)?, c.task, l2)).transpose()?;
    Ok(Prepared {
        train: train_oracle,
        test: test_oracle,
        provenance: train.provenance,
        source_sha256,
        train_sha256,
    })
}

/// Fully resolved configuration of one job.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedJob {
    pub label: String,
    pub name: OptimizerName,
    pub seed: u64,
    pub config: Value,
}

enum JobConfig {
    Sketchy(crate::optimizer::ResolvedSketchyConfig),
    Baseline(crate::optimizer::ResolvedBaselineConfig),
}

fn resolve_job(spec: &OptimizerSpec, seed: u64, max_passes: f64, oracle: &ProblemOracle) -> Result<(ResolvedJob, JobConfig)> {
    let job = match parse_params(spec)? {
        Params::Sketchy(mut cfg) => {
            cfg.seed = seed;
            cfg.max_passes = max_passes;
            JobConfig::Sketchy(resolve_config(&cfg, oracle)?)
        }
        Params::Baseline(mut cfg) => {
            cfg.seed = seed;
            cfg.max_passes = max_passes;
            JobConfig::Baseline(resolve_baseline(&cfg, oracle)?)
        }
    };
    let config = match &job {
        JobConfig::Sketchy(c) => serde_json::to_value(c)?,
        JobConfig::Baseline(c) => serde_json::to_value(c)?,
    };
    Ok((
        ResolvedJob {
            label: spec.label().to_string(),
            name: spec.name,
            seed,
            config,
        },
        job,
    ))
}

/// Resolves every `auto` field against the prepared data.
pub fn resolve_all(loaded: &LoadedConfig, prepared: &Prepared) -> Result<Value> {
    let c = &loaded.config;
    let mut jobs = Vec::new();
    for spec in &c.optimizers {
        for &seed in &c.seeds {
            jobs.push(resolve_job(spec, seed, c.max_passes, &prepared.train)?.0);
        }
    }
    Ok(json!({
        "config": c,
        "dataset": {
            "provenance": prepared.provenance,
            "n_train": prepared.train.n(),
            "n_test": prepared.test.as_ref().map(|t| t.n()),
            "p": prepared.train.p(),
            "source_sha256": prepared.source_sha256,
            "train_sha256": prepared.train_sha256,
        },
        "l2": prepared.train.l2(),
        "smoothness_upper_bound": prepared.train.smoothness_upper_bound(),
        "jobs": jobs,
    }))
}

/// `validate`: checks the config and returns the resolved configuration as pretty JSON.
pub fn cmd_validate(config_path: &Path, overrides: &Overrides) -> Result<String> {
    let loaded = load_config(config_path, overrides)?;
    let prepared = prepare(&loaded)?;
    Ok(serde_json::to_string_pretty(&resolve_all(&loaded, &prepared)?)?)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes metrics rows; floats use shortest round-trip formatting.
pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.passes,
            r.wall_seconds,
            r.train_loss,
            fmt_opt(r.test_loss),
            fmt_opt(r.train_acc),
            fmt_opt(r.test_acc)
        )?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Completed,
    Diverged { iteration: usize },
    Failed { message: String },
}

/// What one (optimizer, seed) job produced.
#[derive(Clone, Debug, Serialize)]
pub struct JobOutcome {
    pub job: ResolvedJob,
    pub csv: PathBuf,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accounting: Option<crate::optimizer::PassAccountant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preconditioner_updates: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub learning_rates: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcomes: Vec<JobOutcome>,
    pub manifest: PathBuf,
}

impl RunSummary {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| !matches!(o.status, JobStatus::Completed))
    }
}

fn execute(job: &JobConfig, name: OptimizerName, eval: Evaluation<'_>, schedule: &EvalSchedule) -> Result<RunOutput> {
    let w0 = vec![0.0; eval.train.p()];
    match (job, name) {
        (JobConfig::Sketchy(c), OptimizerName::SketchySgd) => sketchysgd_run(eval, c, schedule, &w0),
        (JobConfig::Sketchy(c), OptimizerName::SketchySgdTheoretical) => sketchysgd_theoretical_run(eval, c, schedule, &w0),
        (JobConfig::Baseline(c), OptimizerName::Sgd) => sgd_run(eval, c, schedule, &w0),
        (JobConfig::Baseline(c), OptimizerName::Svrg) => svrg_run(eval, c, schedule, &w0),
        _ => unreachable!("parameters are parsed according to the optimizer name"),
    }
}

fn run_job(
    spec: &OptimizerSpec,
    seed: u64,
    loaded: &LoadedConfig,
    prepared: &Prepared,
    out_dir: &Path,
) -> Result<JobOutcome> {
    let c = &loaded.config;
    let (resolved, job) = resolve_job(spec, seed, c.max_passes, &prepared.train)?;
    let stem = format!("{}-seed{seed}", spec.label());
    let csv = out_dir.join(format!("{stem}.csv"));
    let schedule = EvalSchedule {
        every_passes: c.eval_every,
        keep_iterates: c.save_iterates,
    };
    let eval = Evaluation {
        train: &prepared.train,
        test: prepared.test.as_ref(),
    };
    log::info!("running {stem}");
    let mut outcome = JobOutcome {
        job: resolved,
        csv: csv.clone(),
        status: JobStatus::Completed,
        iterations: None,
        accounting: None,
        preconditioner_updates: None,
        learning_rates: Vec::new(),
    };
    match execute(&job, spec.name, eval, &schedule) {
        Ok(out) => {
            write_file(&csv, |w| write_metrics_csv(&out.records, w))?;
            if c.save_iterates {
                let saved: Vec<Value> = out
                    .records
                    .iter()
                    .zip(&out.iterates)
                    .map(|(r, w)| json!({"passes": r.passes, "w": w}))
                    .collect();
                write_file(&out_dir.join(format!("{stem}-iterates.json")), |f| {
                    Ok(serde_json::to_writer(f, &saved)?)
                })?;
            }
            outcome.iterations = Some(out.iterations);
            outcome.accounting = Some(out.accounting);
            outcome.preconditioner_updates = Some(out.preconditioner_updates);
            outcome.learning_rates = out.learning_rates;
        }
        Err(Error::Divergence { iteration, partial }) => {
            log::warn!("{stem} diverged at iteration {iteration}");
            let partial_path = out_dir.join(format!("{stem}.csv.partial"));
            write_file(&partial_path, |w| write_metrics_csv(&partial, w))?;
            outcome.csv = partial_path;
            outcome.status = JobStatus::Diverged { iteration };
        }
        Err(e) => {
            log::error!("{stem} failed: {e}");
            outcome.status = JobStatus::Failed { message: e.to_string() };
        }
    }
    Ok(outcome)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// `run`: one CSV per (optimizer, seed) plus `manifest.json` in the output directory.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunSummary> {
    let loaded = load_config(config_path, overrides)?;
    let prepared = prepare(&loaded)?;
    let resolved = resolve_all(&loaded, &prepared)?;
    let out_dir = loaded.config.output_dir.clone();
    fs::create_dir_all(&out_dir)?;

    let jobs: Vec<(&OptimizerSpec, u64)> = loaded
        .config
        .optimizers
        .iter()
        .flat_map(|s| loaded.config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|(spec, seed)| run_job(spec, *seed, &loaded, &prepared, &out_dir))
            .collect::<Result<Vec<_>>>()
    })?;

    let manifest = out_dir.join("manifest.json");
    let doc = json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
        "outcomes": outcomes,
    });
    write_file(&manifest, |w| Ok(serde_json::to_writer_pretty(w, &doc)?))?;
    Ok(RunSummary { outcomes, manifest })
}

#[derive(Deserialize)]
struct SavedIterate {
    passes: f64,
    w: Vec<f64>,
}

/// Spectrum report plus the scalar summaries written next to its CSV.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseOutput {
    pub passes: f64,
    pub report: SpectrumReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// `diagnose`: spectrum reports at the zero iterate and at requested checkpoints.
pub fn cmd_diagnose(config_path: &Path, overrides: &Overrides) -> Result<Vec<DiagnoseOutput>> {
    let loaded = load_config(config_path, overrides)?;
    let prepared = prepare(&loaded)?;
    let d = &loaded.config.diagnose;
    let oracle = &prepared.train;
    let caps = d.caps;
    if oracle.p() > caps.max_p {
        return Err(Error::TooLarge {
            what: "feature dimension p (diagnose.caps.max_p)",
            size: oracle.p(),
            cap: caps.max_p,
        });
    }
    let rho = match d.rho {
        Auto::Auto => 1e-3 * oracle.smoothness_upper_bound(),
        Auto::Value(r) => r,
    };
    let cfg = ConditioningConfig {
        rank: d.rank,
        rho: Some(rho),
        hessian_batch: match d.hessian_batch {
            Auto::Auto => None,
            Auto::Value(b) => Some(b),
        },
        top_m: d.top_m,
        seed: d.seed,
    };

    let mut points: Vec<(f64, Vec<f64>)> = vec![(0.0, vec![0.0; oracle.p()])];
    if let Some(path) = &d.iterates {
        let saved: Vec<SavedIterate> = serde_json::from_reader(File::open(loaded.base_dir.join(path))?)?;
        for &target in &d.checkpoints {
            let nearest = saved
                .iter()
                .min_by(|a, b| (a.passes - target).abs().total_cmp(&(b.passes - target).abs()))
                .ok_or_else(|| Error::Config("diagnose.iterates: file holds no iterates".into()))?;
            if nearest.w.len() != oracle.p() {
                return Err(Error::DimensionMismatch {
                    expected: oracle.p(),
                    found: nearest.w.len(),
                });
            }
            points.push((nearest.passes, nearest.w.clone()));
        }
    }

    let out_dir = &loaded.config.output_dir;
    fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    for (passes, w) in points {
        let mut report = conditioning_report(oracle, &w, &cfg, &caps)?;
        if d.dissimilarity {
            report.tau = Some(rho_dissimilarity(oracle, &w, rho, &caps)?.tau);
        }
        let all_eigs = crate::diagnostics::dense_hessian(oracle, &w, &caps)
            .and_then(|h| crate::linalg::eigh_small_capped(&h, caps.max_p))?
            .eigenvalues;
        let mut betas = vec![rho];
        betas.extend(&d.betas);
        for beta in betas {
            let clipped: Vec<f64> = all_eigs.iter().map(|l| l.max(0.0)).collect();
            report.effective_dimension.push(EffectiveDimension {
                beta,
                value: effective_dimension(&clipped, beta)?,
            });
        }
        let stem = format!("spectrum-pass{passes}");
        let csv = out_dir.join(format!("{stem}.csv"));
        let json_path = out_dir.join(format!("{stem}.json"));
        write_file(&csv, |w| write_spectrum_csv(&report, w))?;
        write_file(&json_path, |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
        outputs.push(DiagnoseOutput {
            passes,
            report,
            csv,
            json: json_path,
        });
    }
    Ok(outputs)
}

/// Process exit status for an error: 2 configuration, 3 runtime, 4 caps.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Parse { .. } | Error::Io(_) | Error::InvalidArgument(_) => 2,
        Error::TooLarge { .. } => 4,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_params_parse_by_name() {
        let spec: OptimizerSpec =
            serde_json::from_value(json!({"name": "sketchysgd", "params": {"rank": 5, "rho": "auto"}})).unwrap();
        assert!(matches!(parse_params(&spec), Ok(Params::Sketchy(c)) if c.rank == 5));
        let bad: OptimizerSpec =
            serde_json::from_value(json!({"name": "sgd", "params": {"rank": 5}})).unwrap();
        assert!(parse_params(&bad).is_err());
        let staged: OptimizerSpec = serde_json::from_value(json!({"name": "sketchysgd-theoretical"})).unwrap();
        assert!(parse_params(&staged).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let config: RunConfig = serde_json::from_value(json!({
            "dataset": {},
            "task": "ridge",
            "optimizers": [],
            "seeds": [],
        }))
        .unwrap();
        let problems = validate(&LoadedConfig {
            config,
            base_dir: PathBuf::new(),
        });
        assert_eq!(problems.len(), 3, "{problems:?}");
        assert!(problems[0].starts_with("dataset.path"));
    }

    #[test]
    fn csv_rows() {
        let recs = vec![MetricsRecord {
            passes: 0.5,
            wall_seconds: 0.0,
            train_loss: 1.25,
            test_loss: None,
            train_acc: Some(1.0),
            test_acc: None,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n0.5,0,1.25,,1,\n"));
    }

    #[test]
    fn labels_are_binarized() {
        let m = DataMatrix::from_rows(&[vec![1.0], vec![2.0]], vec![0.0, 1.0]).unwrap();
        assert_eq!(binarize_labels(m).unwrap().labels(), &[-1.0, 1.0]);
        let m = DataMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(binarize_labels(m).is_err());
    }
}
