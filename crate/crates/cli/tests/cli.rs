use std::fs;
use std::process::Command;

fn grwlab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_grwlab"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn passing_run_exits_zero_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("compare");
    let status = grwlab()
        .args(["compare", "--synthetic", "--jobs", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "compare");
    assert!(report["assertions"]
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a["passed"] == true));
    assert!(out.join("traces/compare_squared_erm.csv").exists());
    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("experiment=compare"));
}

#[test]
fn failing_assertions_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.conf");
    // far too few epochs to interpolate
    fs::write(&cfg, "experiment=fig1\nepochs=10\nrecord_every=1\n").unwrap();
    let status = grwlab()
        .args(["fig1", "--synthetic", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "experiment=fig1\nbogus=1\n").unwrap();
    let status = grwlab()
        .args(["fig1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));

    // experiment mismatch between argument and file
    fs::write(&cfg, "experiment=fig2\n").unwrap();
    let status = grwlab()
        .args(["fig1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));

    // kernel experiments need a network
    let status = grwlab()
        .args(["ntk-convergence", "--set", "model=linear", "--out"])
        .arg(dir.path().join("ntk"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let out = grwlab()
        .args(["approx-scaling", "--print-config", "--set", "epochs=123"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epochs=123"));
    assert!(text.contains("experiment=approx-scaling"));
}
