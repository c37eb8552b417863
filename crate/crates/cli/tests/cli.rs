use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rrd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrd"))
        .args(args)
        .env("RRD_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Last stdout line parsed as JSON.
fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("summary line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn small_config() -> Value {
    let out = rrd(&["preset", "desk"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut c = summary(&out);
    c["model_teacher"]["layer_sizes"] = serde_json::json!([2, 32, 32]);
    c["model_student"]["layer_sizes"] = serde_json::json!([2, 16]);
    for m in ["model_teacher", "model_student"] {
        c[m]["num_classes"] = 4.into();
        c[m]["proj_dim"] = 8.into();
    }
    c["data"]["num_classes"] = 4.into();
    c["data"]["per_class"] = 30.into();
    c["train"]["epochs"] = 3.into();
    c["train"]["teacher_epochs"] = 3.into();
    c["train"]["batch_size"] = 16.into();
    c["bank"]["capacity"] = 32.into();
    c["eval"] = serde_json::json!({
        "probe": { "data": { "kind": "spirals", "num_classes": 3, "per_class": 20, "noise": 0.05, "seed": 2 }, "steps": 20 }
    });
    c
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_default_sizes_pass() {
    let out = rrd(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = summary(&out);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-5, "{v}");
    assert_eq!(v["passed"], Value::Bool(true));
}

#[test]
fn gradcheck_failure_is_numerical() {
    let out = rrd(&["gradcheck", "--count", "1", "--tolerance", "1e-30"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c["bank"]["warmup_steps"] = 5.into();
    let config = write_config(dir.path(), "c.json", &c);
    let out = rrd(&["train-teacher", "--config", s(&config), "--out", s(&dir.path().join("t.ckpt"))]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("warmup_steps") && err.contains("bank"), "{err}");
}

#[test]
fn invalid_value_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c["train"]["momentum"] = 1.5.into();
    let config = write_config(dir.path(), "c.json", &c);
    let out = rrd(&["train-teacher", "--config", s(&config), "--out", s(&dir.path().join("t.ckpt"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.momentum"), "{}", stderr(&out));
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = rrd(&["train-teacher", "--config", s(&missing), "--out", s(&dir.path().join("t.ckpt"))]);
    assert_eq!(code(&out), 2);

    let config = write_config(dir.path(), "c.json", &small_config());
    let out = rrd(&[
        "distill",
        "--config",
        s(&config),
        "--teacher",
        s(&dir.path().join("missing.ckpt")),
        "--out",
        s(&dir.path().join("s.ckpt")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c["train"]["learning_rate"] = 1e12.into();
    c["train"]["momentum"] = 0.0.into();
    let config = write_config(dir.path(), "c.json", &c);
    let out = rrd(&["train-teacher", "--config", s(&config), "--out", s(&dir.path().join("t.ckpt"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

/// Runs the whole pipeline into `dir` and returns every artifact's bytes.
fn pipeline(config: &Path, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let teacher = dir.join("teacher.ckpt");
    let student = dir.join("student.ckpt");
    let report = dir.join("report.json");
    let emb = dir.join("emb.csv");
    let runs: [Vec<&str>; 4] = [
        vec!["train-teacher", "--config", s(config), "--out", s(&teacher)],
        vec!["distill", "--config", s(config), "--teacher", s(&teacher), "--out", s(&student)],
        vec!["eval", s(&student), "--config", s(config), "--teacher", s(&teacher), "--out", s(&report)],
        vec!["export-embeddings", s(&student), "--config", s(config), "--out", s(&emb)],
    ];
    for args in &runs {
        let out = rrd(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        summary(&out);
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), std::fs::read(dir.join(&n)).unwrap())).collect()
}

#[test]
fn pipeline_is_byte_identical_and_leaves_inputs_alone() {
    let root = tempfile::tempdir().unwrap();
    let config = write_config(root.path(), "c.json", &small_config());
    let before = std::fs::read(&config).unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    std::fs::create_dir(&a).unwrap();
    std::fs::create_dir(&b).unwrap();
    let first = pipeline(&config, &a);
    let second = pipeline(&config, &b);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "emb.csv",
            "report.corr.csv",
            "report.json",
            "student.ckpt",
            "student.metrics.csv",
            "teacher.ckpt",
            "teacher.metrics.csv"
        ]
    );
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if name == "report.json" {
            // Paths inside the report differ; compare the numbers.
            let mut x: Value = serde_json::from_slice(x).unwrap();
            let mut y: Value = serde_json::from_slice(y).unwrap();
            for v in [&mut x, &mut y] {
                v["checkpoint"] = Value::Null;
                v["correlation_difference"]["matrix"] = Value::Null;
            }
            assert_eq!(x, y);
            assert!(x["probe_top1"].is_number() && x["top1_test"].is_number(), "{x}");
        } else {
            assert!(x == y, "{name} differs between runs");
        }
    }
    assert_eq!(std::fs::read(&config).unwrap(), before);

    // Rerunning over existing outputs reproduces them exactly.
    let teacher_before = std::fs::read(a.join("teacher.ckpt")).unwrap();
    let again = pipeline(&config, &a);
    assert_eq!(again, first);
    assert_eq!(std::fs::read(a.join("teacher.ckpt")).unwrap(), teacher_before);
}

#[test]
fn tau_t_sweep_emits_one_csv_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c["train"]["epochs"] = 1.into();
    let config = write_config(dir.path(), "c.json", &c);
    let teacher = dir.path().join("t.ckpt");
    assert_eq!(code(&rrd(&["train-teacher", "--config", s(&config), "--out", s(&teacher)])), 0);
    let out_dir = dir.path().join("sweep");
    let out = rrd(&[
        "sweep",
        "--config",
        s(&config),
        "--teacher",
        s(&teacher),
        "--axis",
        "tau_t",
        "--values",
        "0.01,0.02,0.05,0.1,0.5,1.0",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(summary(&out)["points"].as_array().unwrap().len(), 6);
    let mut files: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        ["tau_t_0.01.csv", "tau_t_0.02.csv", "tau_t_0.05.csv", "tau_t_0.1.csv", "tau_t_0.5.csv", "tau_t_1.0.csv"]
    );
    for f in &files {
        let text = std::fs::read_to_string(out_dir.join(f)).unwrap();
        assert!(text.starts_with("epoch,split,"), "{f}");
    }
}

#[test]
fn sweep_rejects_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config());
    for (axis, values) in [("strategy", "lifo"), ("tau_t", "-1"), ("K", "x")] {
        let out = rrd(&[
            "sweep",
            "--config",
            s(&config),
            "--axis",
            axis,
            "--values",
            values,
            "--out",
            s(&dir.path().join("o")),
        ]);
        assert_eq!(code(&out), 2, "{axis}={values}");
    }
}

#[test]
fn preset_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("faithful.json");
    let out = rrd(&["preset", "paper-faithful", "--out", s(&path)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(v["bank"]["capacity"], 16384);
}
