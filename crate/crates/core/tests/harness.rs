use std::path::Path;

use cfg_anneal::harness::{
    compare_runs, parse_config, read_manifest, read_records, run_experiment, verify_manifest, Aggregation,
    EngineSection, ExperimentKind, Metric, RunConfig, METRICS_FILE,
};

fn small_gan(out: &Path, seeds: &[u64]) -> RunConfig {
    let mut cfg = RunConfig::defaults(ExperimentKind::TrainGan);
    cfg.run.out = out.to_string_lossy().into_owned();
    cfg.run.seeds = seeds.to_vec();
    cfg.run.eval_every = 10;
    cfg.run.eval_samples = 400;
    cfg.model.gen_widths = vec![2, 16, 2];
    cfg.model.disc_widths = vec![2, 16, 1];
    if let EngineSection::TrainGan(n) = &mut cfg.engine {
        n.outer = 20;
        n.batch = 16;
    }
    cfg
}

fn rows(dir: &Path) -> Vec<cfg_anneal::harness::MetricsRecord> {
    read_records(std::fs::File::open(dir.join(METRICS_FILE)).unwrap()).unwrap()
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&small_gan(&a, &[4])).unwrap();
    run_experiment(&small_gan(&b, &[4])).unwrap();
    for f in [METRICS_FILE, "seed-4/generator.json", "seed-4/field.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn one_row_group_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&small_gan(tmp.path(), &[1, 2, 3])).unwrap();
    assert_eq!(out.exit_code(), 0);
    let rows = rows(tmp.path());
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(seeds, vec![1, 2, 3]);
    // Evaluations at 10 and 20 for every seed.
    for s in 1..=3 {
        let its: Vec<usize> = rows.iter().filter(|r| r.seed == s).map(|r| r.iteration).collect();
        assert_eq!(its, vec![10, 20]);
    }
}

#[test]
fn seed_results_do_not_depend_on_company() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&small_gan(&tmp.path().join("alone"), &[2])).unwrap();
    run_experiment(&small_gan(&tmp.path().join("group"), &[1, 2, 3])).unwrap();
    let alone = rows(&tmp.path().join("alone"));
    let group: Vec<_> = rows(&tmp.path().join("group"))
        .into_iter()
        .filter(|r| r.seed == 2)
        .collect();
    assert_eq!(alone, group);
}

#[test]
fn manifest_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&small_gan(tmp.path(), &[1])).unwrap();
    assert!(verify_manifest(tmp.path()).unwrap().is_empty());
    let m = read_manifest(tmp.path()).unwrap();
    assert_eq!(m.seeds, vec![1]);
    assert!(m.files.iter().any(|f| f.path == METRICS_FILE));
    // The recorded config parses back to the config that ran.
    assert_eq!(parse_config(&m.config).unwrap(), small_gan(tmp.path(), &[1]));

    let target = tmp.path().join("seed-1/generator.json");
    let mut bytes = std::fs::read(&target).unwrap();
    bytes.push(b'\n');
    std::fs::write(&target, bytes).unwrap();
    assert_eq!(
        verify_manifest(tmp.path()).unwrap(),
        vec!["seed-1/generator.json".to_string()]
    );
}

#[test]
fn eval_reads_a_saved_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    run_experiment(&small_gan(&train, &[1])).unwrap();
    let mut cfg = RunConfig::defaults(ExperimentKind::Eval);
    cfg.run.out = tmp.path().join("eval").to_string_lossy().into_owned();
    cfg.run.eval_samples = 400;
    if let EngineSection::Eval(e) = &mut cfg.engine {
        e.generator = train.join("seed-1/generator.json").to_string_lossy().into_owned();
    }
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.exit_code(), 0);
    let r = &out.rows[0];
    assert!(r.frechet.unwrap().is_finite());
    assert!(r.modes_covered.unwrap() <= 8);
}

#[test]
fn missing_snapshot_aborts_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(ExperimentKind::Eval);
    cfg.run.out = tmp.path().to_string_lossy().into_owned();
    if let EngineSection::Eval(e) = &mut cfg.engine {
        e.generator = tmp.path().join("nope.json").to_string_lossy().into_owned();
    }
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.exit_code(), 2);
    assert_eq!(read_manifest(tmp.path()).unwrap().aborted, vec![1]);
}

#[test]
fn compare_ranks_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let mut ca = small_gan(&a, &[1, 2]);
    ca.run.id = "a".into();
    let mut cb = small_gan(&b, &[1, 2]);
    cb.run.id = "b".into();
    if let EngineSection::TrainGan(n) = &mut cb.engine {
        n.outer = 10;
        n.n_d = 2;
    }
    cb.run.eval_every = 10;
    run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    let ranked = compare_runs(&[&a, &b], Metric::Frechet, Aggregation::Median).unwrap();
    assert_eq!(ranked.len(), 2);
    assert!(ranked[0].value <= ranked[1].value);

    let single = compare_runs(&[&a], Metric::Frechet, Aggregation::Min).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].runs, vec!["a".to_string()]);
}

#[test]
fn compare_rejects_mismatched_data() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&small_gan(&a, &[1])).unwrap();
    let mut cb = small_gan(&b, &[1]);
    cb.data.seed = 5;
    run_experiment(&cb).unwrap();
    assert!(compare_runs(&[&a, &b], Metric::Frechet, Aggregation::Median).is_err());
}
