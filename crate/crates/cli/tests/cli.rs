use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfg-anneal"))
}

#[test]
fn flow_run_succeeds_and_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("flow");
    let status = bin()
        .args(["flow", "--quiet", "--seed", "1,2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("run_id,seed,iteration"));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn config_file_is_applied() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gc.cfg");
    std::fs::write(&cfg, "# tiny check\ngradcheck.nets = 3\nrun.id = tiny\n").unwrap();
    let out = tmp.path().join("gc");
    let output = bin()
        .arg("grad-check")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("gradcheck.nets = 3"), "{stdout}");
}

#[test]
fn bad_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "flow.steps = 3\nflow.bogus = 1\n").unwrap();
    let output = bin().arg("flow").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("bogus") && err.contains("line 2"), "{err}");

    std::fs::write(&cfg, "nats.outer = 10\n").unwrap();
    let output = bin().arg("flow").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_with_one() {
    let output = bin().args(["flow", "--config", "/nonexistent/x.cfg"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn failed_seed_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("eval.cfg");
    std::fs::write(
        &cfg,
        format!("eval.generator = \"{}\"\n", tmp.path().join("none.json").display()),
    )
    .unwrap();
    let status = bin()
        .arg("eval")
        .arg("--quiet")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn compare_prints_a_ranking() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("flow");
    assert_eq!(
        bin()
            .args(["flow", "--quiet", "--out"])
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let output = bin().args(["compare", "--metric", "kl"]).arg(&out).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("flow"));

    let output = bin()
        .args(["compare", "--metric", "nonsense"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}
