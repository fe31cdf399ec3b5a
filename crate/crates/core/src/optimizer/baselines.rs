use crate::error::{Error, Result};
use crate::linalg::{axpy, SeededRng};
use crate::oracles::{BatchSampler, ProblemOracle};

use super::{EvalSchedule, Evaluation, PassAccountant, Recorder, ResolvedBaselineConfig, RunOutput};

/// `max{1/(3L̂), 1/(2(L̂ + nγ))}` with `L̂` from [`ProblemOracle::smoothness_upper_bound`].
pub fn sgd_default_learning_rate(oracle: &ProblemOracle) -> f64 {
    let l = oracle.smoothness_upper_bound();
    let mu = oracle.l2();
    (1.0 / (3.0 * l)).max(1.0 / (2.0 * (l + oracle.n() as f64 * mu)))
}

fn check_start(oracle: &ProblemOracle, w0: &[f64]) -> Result<()> {
    if w0.len() != oracle.p() {
        return Err(Error::DimensionMismatch {
            expected: oracle.p(),
            found: w0.len(),
        });
    }
    Ok(())
}

/// Plain minibatch SGD with a constant learning rate.
pub fn sgd_run(
    eval: Evaluation<'_>,
    config: &ResolvedBaselineConfig,
    schedule: &EvalSchedule,
    w0: &[f64],
) -> Result<RunOutput> {
    let oracle = eval.train;
    check_start(oracle, w0)?;
    let mut rng = SeededRng::new(config.seed);
    let mut sampler = BatchSampler::new(oracle.n());
    let mut acct = PassAccountant::new(oracle.n());
    let mut recorder = Recorder::new(eval, schedule.clone());
    let mut w = w0.to_vec();
    let mut k = 0;

    recorder.record(&w, 0.0, 0)?;
    while acct.passes() < config.max_passes {
        let batch = sampler.draw(&mut rng, config.grad_batch)?;
        let g = oracle.minibatch_gradient(&w, &batch)?;
        acct.gradient_rows += config.grad_batch as u64;
        axpy(-config.lr, &g, &mut w);
        k += 1;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(recorder.diverged(k));
        }
        recorder.observe(&w, acct.passes(), k)?;
    }
    recorder.finish(&w, acct.passes(), k)?;
    Ok(RunOutput {
        w,
        records: recorder.records,
        iterates: recorder.iterates,
        accounting: acct,
        iterations: k,
        preconditioner_updates: 0,
        learning_rates: vec![config.lr],
    })
}

/// SVRG with a last-iterate snapshot every epoch of `⌈n/b_g⌉` inner steps.
///
/// Each inner step is charged `b_g` rows, although it evaluates the minibatch
/// gradient at both the iterate and the snapshot; each snapshot is charged a
/// full pass.
pub fn svrg_run(
    eval: Evaluation<'_>,
    config: &ResolvedBaselineConfig,
    schedule: &EvalSchedule,
    w0: &[f64],
) -> Result<RunOutput> {
    let oracle = eval.train;
    check_start(oracle, w0)?;
    let n = oracle.n();
    let epoch_len = n.div_ceil(config.grad_batch);
    let mut rng = SeededRng::new(config.seed);
    let mut sampler = BatchSampler::new(n);
    let mut acct = PassAccountant::new(n);
    let mut recorder = Recorder::new(eval, schedule.clone());
    let mut w = w0.to_vec();
    let mut k = 0;

    recorder.record(&w, 0.0, 0)?;
    'epochs: while acct.passes() < config.max_passes {
        let snapshot = w.clone();
        let mu = oracle.full_gradient(&snapshot)?;
        acct.snapshot_rows += n as u64;
        for _ in 0..epoch_len {
            if acct.passes() >= config.max_passes {
                break 'epochs;
            }
            let batch = sampler.draw(&mut rng, config.grad_batch)?;
            let mut g = oracle.minibatch_gradient(&w, &batch)?;
            let g_snap = oracle.minibatch_gradient(&snapshot, &batch)?;
            acct.gradient_rows += config.grad_batch as u64;
            axpy(-1.0, &g_snap, &mut g);
            axpy(1.0, &mu, &mut g);
            axpy(-config.lr, &g, &mut w);
            k += 1;
            if w.iter().any(|x| !x.is_finite()) {
                return Err(recorder.diverged(k));
            }
            recorder.observe(&w, acct.passes(), k)?;
        }
    }
    recorder.finish(&w, acct.passes(), k)?;
    Ok(RunOutput {
        w,
        records: recorder.records,
        iterates: recorder.iterates,
        accounting: acct,
        iterations: k,
        preconditioner_updates: 0,
        learning_rates: vec![config.lr],
    })
}
