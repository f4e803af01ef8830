//! The `cloth` binary: exit codes, configuration precedence and outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cloth(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cloth"));
    c.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.json");
    fs::write(
        &p,
        format!(
            r#"{{"seed": 3, "dataset": {{"kind": "two_moons", "n": 200}},
                "train": {{"iters": 60, "batch_size": 16{extra}}}, "log_every": 20,
                "compare": {{"max_rows": 50}}}}"#
        ),
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn print_config_applies_env_then_flags() {
    let o = cloth(
        &["--print-config", "--seed", "11"],
        &[("CLOTH_TRAIN__ALPHA", "0.7"), ("CLOTH_SEED", "5")],
    );
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 11);
    assert_eq!(v["train"]["alpha"], 0.7);
    assert_eq!(v["train"]["q"], 3);
    assert_eq!(v["dataset"]["kind"], "gaussian_shift");
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(code(&cloth(&[], &[])), 2);
    assert_eq!(code(&cloth(&["frobnicate"], &[])), 2);
    assert_eq!(
        code(&cloth(&["--config", "/nonexistent/run.json", "train"], &[])),
        2
    );
    let o = cloth(&["--print-config"], &[("CLOTH_TRAIN__BATCH_SIZE", "1")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(
        &p,
        r#"{"seed": 1, "dataset": {"kind": "two_moons"}, "unknown": 2}"#,
    )
    .unwrap();
    assert_eq!(
        code(&cloth(&["--config", p.to_str().unwrap(), "train"], &[])),
        2
    );
}

#[test]
fn train_bundle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = cloth(
            &["--config", &cfg, "--out", out.to_str().unwrap(), "train"],
            &[],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["metrics.csv", "model.json", "summary.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3);
        let stripped: Vec<String> = csv
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect();
        csvs.push(stripped);
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn numeric_failure_exits_3_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#", "lr": 1e300"#);
    let out = dir.path().join("o");
    let o = cloth(
        &["--config", &cfg, "--out", out.to_str().unwrap(), "train"],
        &[],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn verify_entropy_suite_passes() {
    let o = cloth(&["verify", "entropy"], &[]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("entropy loss"));
    assert_eq!(code(&cloth(&["verify", "nope"], &[])), 2);
}

#[test]
fn bench_writes_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = cloth(
        &["--out", dir.path().to_str().unwrap(), "bench"],
        &[
            ("CLOTH_BENCH__PS", "[2,16]"),
            ("CLOTH_BENCH__QS", "[1,3]"),
            ("CLOTH_BENCH__REPEATS", "2"),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("method,p,q,time_per_batch_ms,total_ms\n"));
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn sweep_ablate_compare_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("o");
    let o_str = out.to_str().unwrap();

    let o = cloth(
        &[
            "--config",
            &cfg,
            "--out",
            o_str,
            "sweep-q",
            "--q",
            "1,2",
            "--workers",
            "2",
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(out.join("sweep_q.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    assert_eq!(
        code(&cloth(
            &["--config", &cfg, "--out", o_str, "sweep-q", "--q", "2,2"],
            &[]
        )),
        2
    );

    let o = cloth(
        &["--config", &cfg, "--out", o_str, "ablate", "--rows", "1,7"],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert!(out.join("row7_seed3/model.json").exists());

    let model = out.join("row7_seed3/model.json");
    let o = cloth(
        &[
            "--config",
            &cfg,
            "--out",
            o_str,
            "compare-ot",
            "--model",
            model.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("compare_ot.json")).unwrap()).unwrap();
    assert!(r["amortized"].as_f64().unwrap() >= r["exact_free_pi"].as_f64().unwrap());

    let csv = out.join("row7_seed3/metrics.csv");
    let svg = out.join("w.svg");
    let args = |cols: &str| {
        vec![
            "export-plot".to_string(),
            "--csv".into(),
            csv.to_string_lossy().into_owned(),
            "--columns".into(),
            cols.into(),
            "--out-svg".into(),
            svg.to_string_lossy().into_owned(),
        ]
    };
    let run = |cols: &str| {
        let a = args(cols);
        cloth(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[])
    };
    assert_eq!(code(&run("W_est,L_t")), 0);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
    assert!(text.contains(">W_est<") && text.contains(">L_t<"));
    assert_eq!(code(&run("missing")), 2);
}
