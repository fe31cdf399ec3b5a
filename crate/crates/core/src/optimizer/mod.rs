//! SketchySGD and first-order baselines over a [`ProblemOracle`].

mod baselines;
mod learning_rate;
mod sketchy;

use std::time::{Duration, Instant};

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{ProblemOracle, Task};

pub use baselines::{sgd_default_learning_rate, sgd_run, svrg_run};
pub use learning_rate::{estimate_learning_rate, preconditioned_top_eigenvalue};
pub use sketchy::{build_preconditioner, sketchysgd_run, sketchysgd_theoretical_run};

/// A hyperparameter that is either given or derived from the problem.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Auto<T> {
    #[default]
    Auto,
    Value(T),
}

impl<T: Serialize> Serialize for Auto<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => v.serialize(s),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Auto<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Value(T),
            Keyword(String),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Value(v) => Ok(Auto::Value(v)),
            Raw::Keyword(k) if k == "auto" => Ok(Auto::Auto),
            Raw::Keyword(k) => Err(de::Error::custom(format!("expected a number or \"auto\", got {k:?}"))),
        }
    }
}

/// How often the preconditioner is rebuilt, in iterations.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum UpdateFrequency {
    /// Once per pass (`⌈n/b_g⌉`) for logistic regression, never for ridge.
    #[default]
    Auto,
    Every(usize),
    /// Build once at the first iteration and keep it.
    Never,
}

impl Serialize for UpdateFrequency {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            UpdateFrequency::Auto => s.serialize_str("auto"),
            UpdateFrequency::Never => s.serialize_str("never"),
            UpdateFrequency::Every(u) => s.serialize_u64(*u as u64),
        }
    }
}

impl<'de> Deserialize<'de> for UpdateFrequency {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Every(usize),
            Keyword(String),
        }
        match Raw::deserialize(d)? {
            Raw::Every(0) => Err(de::Error::custom("update frequency must be at least 1")),
            Raw::Every(u) => Ok(UpdateFrequency::Every(u)),
            Raw::Keyword(k) if k == "auto" => Ok(UpdateFrequency::Auto),
            Raw::Keyword(k) if k == "never" => Ok(UpdateFrequency::Never),
            Raw::Keyword(k) => Err(de::Error::custom(format!(
                "expected an iteration count, \"auto\" or \"never\", got {k:?}"
            ))),
        }
    }
}

/// Step-size rule for SketchySGD.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum StepRule {
    /// `α / λ₁(P^{-1/2} H_{S'} P^{-1/2})`, re-estimated at every preconditioner update.
    #[default]
    Adaptive,
    /// Estimated like `Adaptive` at the first preconditioner build, then held fixed.
    Frozen,
    Fixed(f64),
}

impl Serialize for StepRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepRule::Adaptive => s.serialize_str("auto"),
            StepRule::Frozen => s.serialize_str("frozen"),
            StepRule::Fixed(eta) => s.serialize_f64(*eta),
        }
    }
}

impl<'de> Deserialize<'de> for StepRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Fixed(f64),
            Keyword(String),
        }
        match Raw::deserialize(d)? {
            Raw::Fixed(eta) => Ok(StepRule::Fixed(eta)),
            Raw::Keyword(k) if k == "auto" => Ok(StepRule::Adaptive),
            Raw::Keyword(k) if k == "frozen" => Ok(StepRule::Frozen),
            Raw::Keyword(k) => Err(de::Error::custom(format!(
                "expected a learning rate, \"auto\" or \"frozen\", got {k:?}"
            ))),
        }
    }
}

fn default_rank() -> usize {
    10
}
fn default_grad_batch() -> usize {
    256
}
fn default_alpha() -> f64 {
    0.5
}
fn default_power_iters() -> usize {
    10
}
fn default_max_passes() -> f64 {
    40.0
}

/// User-facing SketchySGD hyperparameters; `Auto` fields are filled by [`resolve_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchyConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Absolute ρ; `auto` is `10⁻³ · L̂`.
    #[serde(default)]
    pub rho: Auto<f64>,
    #[serde(default = "default_grad_batch")]
    pub grad_batch: usize,
    /// `auto` is `⌊√n⌋`.
    #[serde(default)]
    pub hessian_batch: Auto<usize>,
    #[serde(default)]
    pub update_freq: UpdateFrequency,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default)]
    pub lr: StepRule,
    /// Iterations per averaging stage; only used by the staged variant.
    /// `auto` is `⌈n/b_g⌉`.
    #[serde(default)]
    pub stage_length: Auto<usize>,
    #[serde(default = "default_max_passes")]
    pub max_passes: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SketchyConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            rho: Auto::Auto,
            grad_batch: default_grad_batch(),
            hessian_batch: Auto::Auto,
            update_freq: UpdateFrequency::Auto,
            alpha: default_alpha(),
            power_iters: default_power_iters(),
            lr: StepRule::Adaptive,
            stage_length: Auto::Auto,
            max_passes: default_max_passes(),
            seed: 0,
        }
    }
}

/// SketchySGD hyperparameters with every derived value materialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSketchyConfig {
    pub rank: usize,
    pub rho: f64,
    pub grad_batch: usize,
    pub hessian_batch: usize,
    /// `None` means the first preconditioner is kept for the whole run.
    pub update_every: Option<usize>,
    pub alpha: f64,
    pub power_iters: usize,
    pub lr: StepRule,
    pub stage_length: usize,
    pub max_passes: f64,
    pub seed: u64,
}

/// Fills every `auto` field of `config` from the problem.
///
/// Batch sizes and the rank are clamped to the sample and feature counts.
pub fn resolve_config(config: &SketchyConfig, oracle: &ProblemOracle) -> Result<ResolvedSketchyConfig> {
    let n = oracle.n();
    let p = oracle.p();
    if n == 0 || p == 0 {
        return Err(Error::InvalidData("empty training set".into()));
    }
    if config.rank == 0 || config.grad_batch == 0 || config.power_iters == 0 {
        return Err(Error::Config("rank, grad_batch and power_iters must be at least 1".into()));
    }
    if !(config.alpha > 0.0) || !config.alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be positive, got {}", config.alpha)));
    }
    if !(config.max_passes >= 0.0) || !config.max_passes.is_finite() {
        return Err(Error::Config(format!("max_passes must be nonnegative, got {}", config.max_passes)));
    }
    let rho = match config.rho {
        Auto::Auto => 1e-3 * oracle.smoothness_upper_bound(),
        Auto::Value(rho) => rho,
    };
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Config(format!("rho must resolve to a positive value, got {rho}")));
    }
    let grad_batch = config.grad_batch.min(n);
    let hessian_batch = match config.hessian_batch {
        Auto::Auto => ((n as f64).sqrt().floor() as usize).max(1),
        Auto::Value(0) => return Err(Error::Config("hessian_batch must be at least 1".into())),
        Auto::Value(b) => b.min(n),
    };
    let update_every = match config.update_freq {
        UpdateFrequency::Auto => match oracle.task() {
            Task::Ridge => None,
            Task::Logistic => Some(n.div_ceil(grad_batch)),
        },
        UpdateFrequency::Every(0) => return Err(Error::Config("update_freq must be at least 1".into())),
        UpdateFrequency::Every(u) => Some(u),
        UpdateFrequency::Never => None,
    };
    if let StepRule::Fixed(eta) = config.lr {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Config(format!("fixed learning rate must be nonnegative, got {eta}")));
        }
    }
    let stage_length = match config.stage_length {
        Auto::Auto => n.div_ceil(grad_batch),
        Auto::Value(0) => return Err(Error::Config("stage_length must be at least 1".into())),
        Auto::Value(m) => m,
    };
    Ok(ResolvedSketchyConfig {
        rank: config.rank.min(p),
        rho,
        grad_batch,
        hessian_batch,
        update_every,
        alpha: config.alpha,
        power_iters: config.power_iters,
        lr: config.lr,
        stage_length,
        max_passes: config.max_passes,
        seed: config.seed,
    })
}

/// Hyperparameters of the SGD and SVRG baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// `auto` is `max{1/(3L̂), 1/(2(L̂ + nγ))}`.
    #[serde(default)]
    pub lr: Auto<f64>,
    #[serde(default = "default_grad_batch")]
    pub grad_batch: usize,
    #[serde(default = "default_max_passes")]
    pub max_passes: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr: Auto::Auto,
            grad_batch: default_grad_batch(),
            max_passes: default_max_passes(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedBaselineConfig {
    pub lr: f64,
    pub grad_batch: usize,
    pub max_passes: f64,
    pub seed: u64,
}

pub fn resolve_baseline(config: &BaselineConfig, oracle: &ProblemOracle) -> Result<ResolvedBaselineConfig> {
    if oracle.n() == 0 {
        return Err(Error::InvalidData("empty training set".into()));
    }
    if config.grad_batch == 0 {
        return Err(Error::Config("grad_batch must be at least 1".into()));
    }
    let lr = match config.lr {
        Auto::Auto => sgd_default_learning_rate(oracle),
        Auto::Value(eta) => eta,
    };
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be nonnegative, got {lr}")));
    }
    if !(config.max_passes >= 0.0) || !config.max_passes.is_finite() {
        return Err(Error::Config(format!("max_passes must be nonnegative, got {}", config.max_passes)));
    }
    Ok(ResolvedBaselineConfig {
        lr,
        grad_batch: config.grad_batch.min(oracle.n()),
        max_passes: config.max_passes,
        seed: config.seed,
    })
}

/// One evaluation of the current iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub passes: f64,
    pub wall_seconds: f64,
    /// Full training objective, including the l2 term.
    pub train_loss: f64,
    /// Mean unregularized loss on the held-out split.
    pub test_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// When to evaluate during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSchedule {
    /// Evaluate whenever this many passes have elapsed since the last
    /// boundary; `0` evaluates at every opportunity.
    pub every_passes: f64,
    /// Keep a copy of the iterate alongside each record.
    pub keep_iterates: bool,
}

impl Default for EvalSchedule {
    fn default() -> Self {
        Self {
            every_passes: 1.0,
            keep_iterates: false,
        }
    }
}

/// Counts sample rows touched by optimization work.
///
/// Passes are derived from integer row counts so totals are exact sums of parts.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PassAccountant {
    pub n: usize,
    /// Rows touched by minibatch gradients.
    pub gradient_rows: u64,
    /// Rows touched by Hessian-vector products (sketches and learning-rate powering),
    /// counted once per vector.
    pub hvp_rows: u64,
    /// Rows touched by full-gradient snapshots.
    pub snapshot_rows: u64,
}

impl PassAccountant {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ..Self::default()
        }
    }

    pub fn total_rows(&self) -> u64 {
        self.gradient_rows + self.hvp_rows + self.snapshot_rows
    }

    pub fn passes(&self) -> f64 {
        self.total_rows() as f64 / self.n as f64
    }
}

/// Result of an optimizer run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub w: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    /// Iterates matching `records` when the schedule asks for them.
    pub iterates: Vec<Vec<f64>>,
    pub accounting: PassAccountant,
    pub iterations: usize,
    pub preconditioner_updates: usize,
    /// Step size in force after each preconditioner update (SketchySGD), or the fixed rate.
    pub learning_rates: Vec<f64>,
}

/// Train/test data used to evaluate iterates.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation<'a> {
    pub train: &'a ProblemOracle,
    pub test: Option<&'a ProblemOracle>,
}

impl<'a> Evaluation<'a> {
    pub fn train_only(train: &'a ProblemOracle) -> Self {
        Self { train, test: None }
    }

    pub fn measure(&self, w: &[f64], passes: f64, wall_seconds: f64) -> Result<MetricsRecord> {
        let train_loss = self.train.full_loss(w)?;
        let train_acc = self.train.accuracy(w)?;
        let (test_loss, test_acc) = match self.test {
            Some(t) => (Some(t.data_loss(w)?), t.accuracy(w)?),
            None => (None, None),
        };
        Ok(MetricsRecord {
            passes,
            wall_seconds,
            train_loss,
            test_loss,
            train_acc,
            test_acc,
        })
    }
}

/// Wall-clock accumulator that only runs while optimization work is timed.
struct Stopwatch {
    elapsed: Duration,
    started: Option<Instant>,
}

impl Stopwatch {
    fn started() -> Self {
        Self {
            elapsed: Duration::ZERO,
            started: Some(Instant::now()),
        }
    }

    fn pause(&mut self) {
        if let Some(t) = self.started.take() {
            self.elapsed += t.elapsed();
        }
    }

    fn resume(&mut self) {
        if self.started.is_none() {
            self.started = Some(Instant::now());
        }
    }

    fn seconds(&self) -> f64 {
        self.elapsed.as_secs_f64()
    }
}

/// Applies an [`EvalSchedule`] and collects records.
struct Recorder<'a> {
    eval: Evaluation<'a>,
    schedule: EvalSchedule,
    next_boundary: f64,
    records: Vec<MetricsRecord>,
    iterates: Vec<Vec<f64>>,
    clock: Stopwatch,
}

impl<'a> Recorder<'a> {
    fn new(eval: Evaluation<'a>, schedule: EvalSchedule) -> Self {
        Self {
            eval,
            schedule,
            next_boundary: 0.0,
            records: Vec::new(),
            iterates: Vec::new(),
            clock: Stopwatch::started(),
        }
    }

    fn due(&self, passes: f64) -> bool {
        passes >= self.next_boundary
            && self.records.last().is_none_or(|r| passes > r.passes)
    }

    /// Records if a schedule boundary was crossed. Divergence is reported with
    /// the records gathered so far.
    fn observe(&mut self, w: &[f64], passes: f64, iteration: usize) -> Result<()> {
        if self.due(passes) {
            self.record(w, passes, iteration)?;
        }
        Ok(())
    }

    fn record(&mut self, w: &[f64], passes: f64, iteration: usize) -> Result<()> {
        self.clock.pause();
        let rec = self.eval.measure(w, passes, self.clock.seconds())?;
        if !rec.train_loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                partial: std::mem::take(&mut self.records),
            });
        }
        self.records.push(rec);
        if self.schedule.keep_iterates {
            self.iterates.push(w.to_vec());
        }
        let every = self.schedule.every_passes;
        self.next_boundary = if every > 0.0 {
            ((passes / every).floor() + 1.0) * every
        } else {
            passes
        };
        self.clock.resume();
        Ok(())
    }

    /// Final record, unless the last one already describes this state.
    fn finish(&mut self, w: &[f64], passes: f64, iteration: usize) -> Result<()> {
        if self.records.last().is_none_or(|r| passes > r.passes) {
            self.record(w, passes, iteration)?;
        }
        Ok(())
    }

    fn diverged(&mut self, iteration: usize) -> Error {
        Error::Divergence {
            iteration,
            partial: std::mem::take(&mut self.records),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::DataMatrix;

    fn unit_rows(n: usize, task: Task) -> ProblemOracle {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let labels = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        ProblemOracle::new(DataMatrix::from_rows(&rows, labels).unwrap(), task, 0.0).unwrap()
    }

    #[test]
    fn resolves_ridge_defaults() {
        let o = unit_rows(10_000, Task::Ridge);
        let c = resolve_config(&SketchyConfig::default(), &o).unwrap();
        assert!((c.rho - 1e-3).abs() < 1e-18);
        assert_eq!(c.hessian_batch, 100);
        assert_eq!(c.update_every, None);
        assert_eq!(c.grad_batch, 256);
        assert_eq!(c.rank, 2); // clamped to p
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.power_iters, 10);
    }

    #[test]
    fn resolves_logistic_defaults() {
        let o = unit_rows(1000, Task::Logistic);
        let c = resolve_config(&SketchyConfig::default(), &o).unwrap();
        assert_eq!(c.update_every, Some(4));
        assert!((c.rho - 2.5e-4).abs() < 1e-18);
        assert_eq!(c.hessian_batch, 31);
    }

    #[test]
    fn config_json_roundtrip() {
        let json = r#"{"rank": 5, "rho": "auto", "hessian_batch": 64, "update_freq": "never", "lr": "frozen"}"#;
        let c: SketchyConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.rank, 5);
        assert_eq!(c.rho, Auto::Auto);
        assert_eq!(c.hessian_batch, Auto::Value(64));
        assert_eq!(c.update_freq, UpdateFrequency::Never);
        assert_eq!(c.lr, StepRule::Frozen);
        let back: SketchyConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<SketchyConfig>(r#"{"rho": "big"}"#).is_err());
        assert!(serde_json::from_str::<SketchyConfig>(r#"{"update_freq": 0}"#).is_err());
        assert!(serde_json::from_str::<SketchyConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let o = unit_rows(10, Task::Ridge);
        let bad = SketchyConfig {
            rho: Auto::Value(-1.0),
            ..SketchyConfig::default()
        };
        assert!(resolve_config(&bad, &o).is_err());
        let bad = SketchyConfig {
            alpha: 0.0,
            ..SketchyConfig::default()
        };
        assert!(resolve_config(&bad, &o).is_err());
    }

    #[test]
    fn accountant_sums_parts() {
        let mut acc = PassAccountant::new(8);
        acc.gradient_rows += 4;
        acc.hvp_rows += 6;
        acc.snapshot_rows += 8;
        assert_eq!(acc.passes(), 18.0 / 8.0);
    }
}
