use crate::error::{Error, Result};
use crate::linalg::{axpy, SeededRng};
use crate::nystrom::{rand_nys_approx, NystromApprox};
use crate::oracles::{BatchSampler, ProblemOracle};

use super::learning_rate::estimate_learning_rate;
use super::{EvalSchedule, Evaluation, PassAccountant, Recorder, ResolvedSketchyConfig, RunOutput, StepRule};

/// Sketches the Hessian of a fresh batch of `hessian_batch` samples at `w`.
///
/// The `rank` Hessian-vector products are issued as a single blocked product.
pub fn build_preconditioner(
    oracle: &ProblemOracle,
    w: &[f64],
    rank: usize,
    hessian_batch: usize,
    sampler: &mut BatchSampler,
    rng: &mut SeededRng,
) -> Result<NystromApprox> {
    let batch = sampler.draw(rng, hessian_batch)?;
    let mut nys = rand_nys_approx(
        |q| oracle.minibatch_hvp_block(w, &batch, q),
        oracle.p(),
        rank,
        rng,
    )?;
    nys.anchor = Some(w.to_vec());
    nys.hessian_batch = Some(batch);
    Ok(nys)
}

/// Practical SketchySGD: preconditioned minibatch SGD whose preconditioner and
/// learning rate are refreshed every `update_every` iterations.
pub fn sketchysgd_run(
    eval: Evaluation<'_>,
    config: &ResolvedSketchyConfig,
    schedule: &EvalSchedule,
    w0: &[f64],
) -> Result<RunOutput> {
    run(eval, config, schedule, w0, false)
}

/// Staged SketchySGD with a fixed learning rate: each stage takes
/// `stage_length` preconditioned steps and restarts from the average of the
/// iterates it produced. Preconditioner updates follow a global iteration
/// counter across stages. Records are taken at stage ends only.
pub fn sketchysgd_theoretical_run(
    eval: Evaluation<'_>,
    config: &ResolvedSketchyConfig,
    schedule: &EvalSchedule,
    w0: &[f64],
) -> Result<RunOutput> {
    if config.lr == StepRule::Adaptive {
        return Err(Error::Config(
            "the staged variant needs a fixed learning rate (a number or \"frozen\")".into(),
        ));
    }
    run(eval, config, schedule, w0, true)
}

fn run(
    eval: Evaluation<'_>,
    config: &ResolvedSketchyConfig,
    schedule: &EvalSchedule,
    w0: &[f64],
    averaging: bool,
) -> Result<RunOutput> {
    let oracle = eval.train;
    let (n, p) = (oracle.n(), oracle.p());
    if w0.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: w0.len(),
        });
    }
    let mut rng = SeededRng::new(config.seed);
    let mut sampler = BatchSampler::new(n);
    let mut acct = PassAccountant::new(n);
    let mut recorder = Recorder::new(eval, schedule.clone());
    let mut w = w0.to_vec();
    let mut nys: Option<NystromApprox> = None;
    let mut eta = match config.lr {
        StepRule::Fixed(eta) => eta,
        _ => f64::NAN,
    };
    let mut learning_rates = Vec::new();
    let mut updates = 0;
    let mut k = 0usize;
    let stage_len = if averaging { config.stage_length } else { usize::MAX };

    recorder.record(&w, 0.0, 0)?;
    'stages: loop {
        let mut sum = vec![0.0; p];
        let mut taken = 0usize;
        while taken < stage_len {
            if acct.passes() >= config.max_passes {
                break;
            }
            let batch = sampler.draw(&mut rng, config.grad_batch)?;
            let g = oracle.minibatch_gradient(&w, &batch)?;
            acct.gradient_rows += config.grad_batch as u64;

            let refresh = k == 0 || config.update_every.is_some_and(|u| k.is_multiple_of(u));
            if refresh {
                let fresh = build_preconditioner(oracle, &w, config.rank, config.hessian_batch, &mut sampler, &mut rng)?;
                acct.hvp_rows += (config.rank * config.hessian_batch) as u64;
                updates += 1;
                let estimate = match config.lr {
                    StepRule::Adaptive => true,
                    StepRule::Frozen => updates == 1,
                    StepRule::Fixed(_) => false,
                };
                if estimate {
                    let lr_batch = sampler.draw(&mut rng, config.hessian_batch)?;
                    let curv = oracle.batch_curvatures(&w, &lr_batch)?;
                    let (new_eta, calls) = estimate_learning_rate(
                        |v| Ok(oracle.hvp_with_curvatures(&lr_batch, &curv, v)),
                        &fresh,
                        config.rho,
                        config.alpha,
                        config.power_iters,
                        &mut rng,
                    )?;
                    acct.hvp_rows += (calls * config.hessian_batch) as u64;
                    eta = new_eta;
                }
                learning_rates.push(eta);
                nys = Some(fresh);
            }
            let precond = nys.as_ref().expect("preconditioner built at k = 0");
            let dir = precond.precond_solve(config.rho, &g)?;
            axpy(-eta, &dir, &mut w);
            k += 1;
            taken += 1;
            if w.iter().any(|x| !x.is_finite()) {
                return Err(recorder.diverged(k));
            }
            if averaging {
                axpy(1.0, &w, &mut sum);
            } else {
                recorder.observe(&w, acct.passes(), k)?;
            }
        }
        if !averaging {
            break;
        }
        if taken == 0 {
            break;
        }
        let inv = 1.0 / taken as f64;
        w = sum.into_iter().map(|x| x * inv).collect();
        recorder.observe(&w, acct.passes(), k)?;
        if taken < stage_len {
            break 'stages;
        }
    }
    recorder.finish(&w, acct.passes(), k)?;

    Ok(RunOutput {
        w,
        records: recorder.records,
        iterates: recorder.iterates,
        accounting: acct,
        iterations: k,
        preconditioner_updates: updates,
        learning_rates,
    })
}
