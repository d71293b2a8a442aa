use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_brainenc");

const SPEC: &str = r#"{"samples_per_subject": 96, "test_samples": 32, "lh_vertices": 40,
    "rh_vertices": 30, "height": 8, "width": 8, "seed": 3}"#;

fn config(seed: u64) -> String {
    format!(
        r#"{{"model": {{"extractor": {{"kind": "mlp", "widths": [32], "activation": "tanh", "d_i": 16}}, "d_s": 16}},
            "train": {{"lr0": 0.001, "max_epochs": 2, "weight_decay": 0.5, "seed": {seed}}}}}"#
    )
}

fn brainenc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("BRAINENC_RUN_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn brainenc")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brainenc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    fs::write(dir.path().join("c0.json"), config(0)).unwrap();
    fs::write(dir.path().join("c1.json"), config(1)).unwrap();
    ok(
        dir.path(),
        &["gen-data", "--spec", "spec.json", "--out", "data"],
    );
    dir
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = setup();
    let d = tmp.path();
    ok(
        d,
        &[
            "pretrain", "--config", "c0.json", "--data", "data", "--out", "pre",
        ],
    );
    for (cfg, run) in [("c0.json", "ft0"), ("c1.json", "ft1")] {
        ok(
            d,
            &[
                "finetune",
                "--config",
                cfg,
                "--data",
                "data",
                "--subject",
                "1",
                "--init",
                "pre",
                "--out",
                run,
            ],
        );
        for f in [
            "config.json",
            "run.json",
            "log.jsonl",
            "checkpoint/checkpoint.json",
        ] {
            assert!(d.join(run).join(f).exists(), "{run}/{f} missing");
        }
        let pred = format!("p_{run}");
        let report = format!("r_{run}.json");
        ok(
            d,
            &[
                "predict", "--ckpt", run, "--data", "data", "--split", "val", "--out", &pred,
            ],
        );
        let table = ok(
            d,
            &[
                "evaluate", "--pred", &pred, "--data", "data", "--split", "val", "--out", &report,
            ],
        );
        assert!(table.contains("overall m"));
    }
    let log = fs::read_to_string(d.join("ft0/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["val_m"].is_f64() && rec["lr"].is_f64());
    }

    fs::write(
        d.join("ens.json"),
        r#"{"members": [{"predictions": "p_ft0", "report": "r_ft0.json"},
                        {"predictions": "p_ft1", "report": "r_ft1.json"}]}"#,
    )
    .unwrap();
    ok(d, &["ensemble", "--spec", "ens.json", "--out", "p_ens"]);
    ok(
        d,
        &[
            "evaluate",
            "--pred",
            "p_ens",
            "--data",
            "data",
            "--split",
            "val",
            "--out",
            "r_ens.json",
        ],
    );
    let ens: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("p_ens/predictions.json")).unwrap())
            .unwrap();
    let members = ens["meta"]["members"].as_array().unwrap();
    assert_eq!(members.len(), 2);
    let sum: f64 = members
        .iter()
        .map(|m| m["weights"][0][0].as_f64().unwrap())
        .sum();
    assert_eq!(sum, 1.0);

    let table = ok(d, &["report", "--in", "r_ens.json"]);
    assert!(table.contains("lh") && table.contains("rh"));

    ok(
        d,
        &[
            "predict",
            "--ckpt",
            "pre/checkpoint",
            "--data",
            "data",
            "--split",
            "test",
            "--out",
            "p_test",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--pred",
            "p_test",
            "--data",
            "data",
            "--split",
            "test",
            "--out",
            "r_test.json",
        ],
    );
}

#[test]
fn repeated_pretrain_is_bitwise_identical() {
    let tmp = setup();
    let d = tmp.path();
    ok(
        d,
        &[
            "pretrain", "--config", "c0.json", "--data", "data", "--out", "a",
        ],
    );
    ok(
        d,
        &[
            "pretrain", "--config", "c0.json", "--data", "data", "--out", "b",
        ],
    );
    let mut names: Vec<_> = fs::read_dir(d.join("a/checkpoint"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 2);
    for n in names {
        assert_eq!(
            fs::read(d.join("a/checkpoint").join(&n)).unwrap(),
            fs::read(d.join("b/checkpoint").join(&n)).unwrap()
        );
    }
    assert_eq!(
        fs::read(d.join("a/log.jsonl")).unwrap(),
        fs::read(d.join("b/log.jsonl")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_2_with_key_path() {
    let tmp = setup();
    let d = tmp.path();
    fs::write(d.join("bad.json"), r#"{"train": {"max_epoch": 3}}"#).unwrap();
    let out = brainenc(
        d,
        &[
            "pretrain", "--config", "bad.json", "--data", "data", "--out", "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.max_epoch"), "{err}");
    assert!(!d.join("x").exists());

    fs::write(d.join("bad_spec.json"), r#"{"lh_vertices": "many"}"#).unwrap();
    let out = brainenc(d, &["gen-data", "--spec", "bad_spec.json", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lh_vertices"));
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = setup();
    let d = tmp.path();
    assert_eq!(brainenc(d, &["pretrain", "--nope"]).status.code(), Some(1));
    assert_eq!(brainenc(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(brainenc(d, &["--help"]).status.code(), Some(0));

    let out = brainenc(
        d,
        &[
            "pretrain", "--config", "c0.json", "--data", "missing", "--out", "x",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let out = brainenc(
        d,
        &[
            "finetune",
            "--config",
            "c0.json",
            "--data",
            "data",
            "--subject",
            "9",
            "--out",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(3));

    fs::write(
        d.join("diverge.json"),
        r#"{"train": {"lr0": 1e30, "max_epochs": 2}, "model": {"d_s": 8, "extractor": {"widths": [8], "d_i": 8}}}"#,
    )
    .unwrap();
    let out = brainenc(
        d,
        &[
            "pretrain",
            "--config",
            "diverge.json",
            "--data",
            "data",
            "--out",
            "x",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_root_env_places_relative_run_dirs() {
    let tmp = setup();
    let d = tmp.path();
    let root = d.join("runs");
    let out = Command::new(BIN)
        .args([
            "finetune",
            "--config",
            "c0.json",
            "--data",
            "data",
            "--subject",
            "0",
            "--out",
            "scratch",
        ])
        .current_dir(d)
        .env("BRAINENC_RUN_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(root.join("scratch/checkpoint/checkpoint.json").exists());
    let out = Command::new(BIN)
        .args([
            "predict", "--ckpt", "scratch", "--data", "data", "--out", "p",
        ])
        .current_dir(d)
        .env("BRAINENC_RUN_ROOT", &root)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["selftest"]);
    assert!(stdout.lines().count() >= 20);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
