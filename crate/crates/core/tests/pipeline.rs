//! End-to-end: libsvm text through preprocessing into the optimizers.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use sketchysgd::data::{parse_libsvm, split, RawDataset, Standardizer};
use sketchysgd::{
    resolve_baseline, resolve_config, sgd_run, sketchysgd_run, BaselineConfig, EvalSchedule, Evaluation,
    ProblemOracle, SketchyConfig, Task,
};

/// Logistic data with badly scaled features, written sparsely.
fn libsvm_text(n: usize, p: usize, seed: u64) -> String {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let w_true: Vec<f64> = (0..p).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut text = String::new();
    for _ in 0..n {
        let mut z = 0.0;
        let mut row = String::new();
        for (j, wj) in w_true.iter().enumerate() {
            if rng.gen_bool(0.6) {
                let scale = 10f64.powi(j as i32 % 4 - 1);
                let x: f64 = rng.gen_range(-1.0..1.0) * scale;
                z += wj * x / scale;
                row.push_str(&format!(" {}:{x}", j + 1));
            }
        }
        let label = if z + 0.3 * rng.gen_range(-1.0..1.0) > 0.0 { 1 } else { 0 };
        text.push_str(&format!("{label}{row}\n"));
    }
    text
}

fn gradient_norm(oracle: &ProblemOracle, w: &[f64]) -> f64 {
    oracle.full_gradient(w).unwrap().iter().map(|g| g * g).sum::<f64>().sqrt()
}

#[test]
fn preprocessed_logistic_problem_trains() {
    let raw = parse_libsvm(libsvm_text(1500, 24, 11).as_bytes(), None).unwrap();
    assert_eq!(raw.matrix.p(), 24);
    let (train, test) = split(&raw, 0.8, 3).unwrap();
    let scaler = Standardizer::fit(&train).unwrap();
    let oracle = |d: RawDataset, l2| {
        let labels = d.matrix.labels().iter().map(|&y| 2.0 * y - 1.0).collect();
        ProblemOracle::new(d.matrix.with_labels(labels).unwrap(), Task::Logistic, l2).unwrap()
    };
    let train = oracle(scaler.transform(&train).unwrap(), 1e-3);
    let test = oracle(scaler.transform(&test).unwrap(), 0.0);
    let eval = Evaluation {
        train: &train,
        test: Some(&test),
    };

    let w0 = vec![0.0; train.p()];
    let g0 = gradient_norm(&train, &w0);
    let cfg = resolve_config(
        &SketchyConfig {
            max_passes: 15.0,
            seed: 2,
            ..SketchyConfig::default()
        },
        &train,
    )
    .unwrap();
    let out = sketchysgd_run(eval, &cfg, &EvalSchedule::default(), &w0).unwrap();
    assert!(out.preconditioner_updates >= 2);
    let first = &out.records[0];
    let last = out.records.last().unwrap();
    assert!(last.passes >= 15.0);
    assert!(last.train_loss < 0.5 * first.train_loss, "{first:?} -> {last:?}");
    assert!(last.train_acc.unwrap() > 0.85, "{last:?}");
    assert!(last.test_loss.is_some());
    let g = gradient_norm(&train, &out.w);
    assert!(g < 0.15 * g0, "gradient norm {g} vs initial {g0}");

    let sgd_cfg = resolve_baseline(
        &BaselineConfig {
            max_passes: 15.0,
            seed: 2,
            ..BaselineConfig::default()
        },
        &train,
    )
    .unwrap();
    let sgd = sgd_run(eval, &sgd_cfg, &EvalSchedule::default(), &w0).unwrap();
    let sgd_last = sgd.records.last().unwrap();
    assert!(sgd_last.train_loss.is_finite());
    assert!(sgd_last.train_loss < first.train_loss);
    assert!(last.train_loss < sgd_last.train_loss, "sketchysgd {last:?}, sgd {sgd_last:?}");
}

#[test]
fn sparse_and_dense_storage_give_the_same_trajectory() {
    let raw = parse_libsvm(libsvm_text(400, 10, 5).as_bytes(), None).unwrap();
    let labels: Vec<f64> = raw.matrix.labels().iter().map(|&y| 2.0 * y - 1.0).collect();
    let sparse = raw.matrix.clone().with_labels(labels).unwrap();
    assert!(sparse.is_sparse());
    let dense = sparse.to_dense();
    let run = |m| {
        let oracle = ProblemOracle::new(m, Task::Logistic, 1e-2).unwrap();
        let cfg = resolve_config(
            &SketchyConfig {
                max_passes: 4.0,
                ..SketchyConfig::default()
            },
            &oracle,
        )
        .unwrap();
        sketchysgd_run(Evaluation::train_only(&oracle), &cfg, &EvalSchedule::default(), &[0.0; 10]).unwrap()
    };
    let (a, b) = (run(sparse), run(dense));
    assert_eq!(a.iterations, b.iterations);
    for (x, y) in a.w.iter().zip(&b.w) {
        assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
    }
}
