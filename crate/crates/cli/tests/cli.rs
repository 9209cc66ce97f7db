use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tnf_cli::Manifest;

fn tnf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnf"))
        .args(args)
        .arg("--log")
        .arg("warn")
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_every_subcommand_and_shared_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = tnf(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for sub in ["simulate", "train", "density", "sample", "fpe", "km", "compare", "run"] {
        assert!(text.contains(sub), "missing {sub}");
        let o = tnf(&[sub, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{sub} --help");
        let sub_text = stdout(&o);
        assert!(sub_text.contains("--seed") && sub_text.contains("--out"), "{sub}: {sub_text}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tnf(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&tnf(&["simulate", "--n", "many"], dir.path())), 1);
    assert_eq!(code(&tnf(&["simulate", "--system", "ex4"], dir.path())), 1);
    let o = tnf(&["simulate", "--system", "ex9", "--out", "x"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown system"));

    fs::write(dir.path().join("neg.json"), r#"{"system":"ex1","train":{"learning_rate":-0.1}}"#).unwrap();
    let o = tnf(&["run", "--config", "neg.json", "--check"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tnf(&["density", "--model", "missing.json", "--out", "d"], dir.path());
    assert_eq!(code(&o), 2);
    fs::write(dir.path().join("bad.json"), "{").unwrap();
    assert_eq!(code(&tnf(&["sample", "--model", "bad.json", "--times", "0.5", "--out", "s"], dir.path())), 2);
}

#[test]
fn check_prints_the_normalized_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"system":"ex4"}"#).unwrap();
    let o = tnf(&["run", "--config", "c.json", "--check", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0);
    let cfg = tnf_cli::parse_config(&stdout(&o)).unwrap();
    assert_eq!(cfg.dataset.seed, 7);
    assert_eq!(cfg.fpe.enabled, Some(true));
    assert_eq!(cfg.dataset.schedule().unwrap().times().len(), 21);
}

fn manifest(dir: &Path) -> Manifest {
    Manifest::load(&dir.join("manifest.json")).unwrap()
}

#[test]
fn stage_commands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = tnf(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    ok(&["simulate", "--system", "ex4", "--n", "60", "--t1", "0.2", "--seed", "3", "--out", "sim"]);
    let csv = fs::read_to_string(d.join("sim/dataset.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2\n"));
    assert_eq!(csv.lines().count(), 1 + 5 * 60);
    assert!(manifest(&d.join("sim")).get("dataset.json").is_some());

    ok(&["train", "--data", "sim/dataset.csv", "--max-iters", "5", "--out", "model"]);
    let m = manifest(&d.join("model"));
    for f in ["model.json", "loss.csv", "train_summary.json"] {
        assert!(m.get(f).is_some(), "{f}");
    }
    ok(&["train", "--data", "sim/dataset.csv", "--max-iters", "5", "--out", "named/flow.json"]);
    assert!(d.join("named/flow.json").exists() && d.join("named/loss.csv").exists());

    ok(&["density", "--model", "model/model.json", "--times", "0,0.1", "--half-width", "4", "--out", "dens"]);
    let m = manifest(&d.join("dens"));
    for f in ["grids/flow/t0.0000.csv", "grids/flow/t0.1000.pgm", "density_summary.json"] {
        assert!(m.get(f).is_some(), "{f}");
    }
    let pgm = fs::read(d.join("dens/grids/flow/t0.1000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n41 41\n255\n"));

    ok(&["sample", "--model", "model/model.json", "--times", "0.1", "--n", "7", "--seed", "1", "--out", "smp"]);
    assert_eq!(fs::read_to_string(d.join("smp/samples.csv")).unwrap().lines().count(), 8);

    ok(&["fpe", "--system", "ex4", "--times", "0,0.1", "--half-width", "4", "--out", "fd"]);
    ok(&["compare", "--a", "fd/grids/fpe", "--b", "dens/grids/flow", "--out", "cmp"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cmp/report.json")).unwrap()).unwrap();
    assert_eq!(report["times"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(d.join("cmp/report_curves.csv")).unwrap().starts_with("t,"));

    ok(&["simulate", "--system", "ex4", "--t1", "0.02", "--snapshot-dt", "0.01", "--pairs", "300", "--out", "pairs"]);
    ok(&["km", "--data", "pairs/pairs.csv", "--bin", "0.5", "--out", "km"]);
    ok(&["fpe", "--system", "ex4", "--km", "km/km_fields.json", "--times", "0.05", "--half-width", "4", "--out", "fdkm"]);
    assert!(manifest(&d.join("fdkm")).get("fpe_diagnostics.json").is_some());
}

#[test]
fn seeded_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = tnf(&["simulate", "--system", "ex5", "--n", "40", "--t1", "0.1", "--seed", "9", "--out", out], d);
        assert_eq!(code(&o), 0);
        let o = tnf(&["train", "--data", &format!("{out}/dataset.csv"), "--max-iters", "8", "--seed", "9", "--out", out], d);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(manifest(&d.join("a")), manifest(&d.join("b")));
    let o = tnf(&["simulate", "--system", "ex5", "--n", "40", "--t1", "0.1", "--seed", "10", "--out", "c"], d);
    assert_eq!(code(&o), 0);
    assert_ne!(
        manifest(&d.join("a")).get("dataset.csv").unwrap().sha256,
        manifest(&d.join("c")).get("dataset.csv").unwrap().sha256
    );
}
