use std::time::{Duration, Instant};

use cfg_anneal::harness::{run_experiment, EngineSection, ExperimentKind, RunConfig, TargetSpec};

#[test]
fn annealed_cfg_training_fits_the_two_gaussian_target() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(ExperimentKind::TrainCfg);
    cfg.run.out = tmp.path().to_string_lossy().into_owned();
    cfg.run.eval_every = 200;
    cfg.data.target = TargetSpec::TwoGaussian { offset: 1.0 };
    if let EngineSection::TrainCfg(c) = &cfg.engine {
        assert_eq!(c.epochs, 200);
    }
    let out = run_experiment(&cfg).unwrap();
    let last = out.rows.last().unwrap();
    assert_eq!(last.iteration, 200);
    let kl = last.kl.unwrap();
    assert!(kl < 0.05, "final fitted KL {kl}");
}

/// Runtime budget for the deepest nesting used in comparisons.
#[test]
#[ignore = "takes minutes; run with --ignored"]
fn nats_depth_ten_fits_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(ExperimentKind::TrainGan);
    cfg.run.out = tmp.path().to_string_lossy().into_owned();
    cfg.run.eval_every = 2000;
    if let EngineSection::TrainGan(n) = &mut cfg.engine {
        n.n_d = 10;
        n.outer = 2000;
    }
    let started = Instant::now();
    let out = run_experiment(&cfg).unwrap();
    let took = started.elapsed();
    assert_eq!(out.exit_code(), 0);
    println!("N_d=10, 2000 outer iterations: {took:?}");
    assert!(took < Duration::from_secs(600), "{took:?}");
}
