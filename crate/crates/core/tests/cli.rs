use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_fbpc-lab");

fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "dataset": {"kind": "synthetic", "name": "two_moons", "n_train": 60, "n_test": 40, "noise": 0.1},
        "architectures": [{"family": "mlp", "hidden_widths": [6]}],
        "ipc": 2,
        "experts": {"n_traj": 2, "epochs": 4, "lr": 0.1, "batch_size": 16},
        "fbpc": {"iterations": 3, "mc_samples": 4, "excursion_steps": 3, "min_expert_epoch": 1,
                 "map_loss_threshold": 0.3, "map_optimizer": {"lr": 0.01}},
        "bpc": {"iterations": 3, "mc_samples": 2, "min_expert_epoch": 1},
        "sghmc": {"eta": 0.003, "epochs": 60, "collect_every": 10, "burn_in": 10},
        "pool_root": dir.join("pools"),
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut cfg, extra) {
        base.extend(more);
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FBPC_LAB_CACHE")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pool_dirs(root: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    for ds in fs::read_dir(root).unwrap() {
        for pool in fs::read_dir(ds.unwrap().path()).unwrap() {
            out.push(pool.unwrap().path());
        }
    }
    out
}

#[test]
fn gen_experts_is_deterministic_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "gen-experts",
        "--config",
        s(&cfg),
        "--pool-root",
        s(&a),
        "--out",
        s(&dir.path().join("o1")),
    ]);
    ok(&[
        "gen-experts",
        "--config",
        s(&cfg),
        "--pool-root",
        s(&b),
        "--out",
        s(&dir.path().join("o2")),
    ]);
    let (pa, pb) = (pool_dirs(&a), pool_dirs(&b));
    assert_eq!(pa.len(), 1);
    assert_eq!(pa[0].file_name(), pb[0].file_name());
    assert_eq!(
        fs::read(pa[0].join("manifest.json")).unwrap(),
        fs::read(pb[0].join("manifest.json")).unwrap()
    );
    assert!(dir.path().join("o1/gen_experts_config.json").is_file());

    let refused = run(&[
        "gen-experts",
        "--config",
        s(&cfg),
        "--pool-root",
        s(&a),
        "--out",
        s(&dir.path().join("o1")),
    ]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(&[
        "gen-experts",
        "--config",
        s(&cfg),
        "--pool-root",
        s(&a),
        "--out",
        s(&dir.path().join("o1")),
        "--force",
    ]);
}

#[test]
fn default_expert_settings_write_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({
            "dataset": {"kind": "synthetic", "name": "two_moons", "n_train": 16, "n_test": 8, "noise": 0.1},
            "architectures": [{"family": "mlp", "hidden_widths": [2]}],
            "experts": {},
        }),
    );
    ok(&[
        "gen-experts",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("out")),
    ]);
    let pools = pool_dirs(&dir.path().join("pools"));
    let files = fs::read_dir(&pools[0])
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "fbpa")
        })
        .count();
    assert_eq!(files, 10 * 51);
    let manifest: Value =
        serde_json::from_slice(&fs::read(pools[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["lr"], json!(0.01));
    assert_eq!(manifest["trajectories"].as_array().unwrap().len(), 10);
}

#[test]
fn train_needs_pools_except_for_random() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let out = dir.path().join("rand");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--method",
        "random",
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    assert!(out.join("coreset_seed4.fbpa").is_file());
    let snap: Value =
        serde_json::from_slice(&fs::read(out.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(snap["seeds"], json!([4]));
    assert_eq!(snap["method"], json!("random"));

    let missing = run(&[
        "train",
        "--config",
        s(&cfg),
        "--method",
        "fbpc",
        "--out",
        s(&dir.path().join("f")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("mlp") && err.contains("gen-experts"), "{err}");
}

#[test]
fn training_replays_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    ok(&[
        "gen-experts",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("g")),
    ]);
    for method in ["fbpc", "fbpc_isotropic", "bpc_fkl"] {
        let (a, b) = (
            dir.path().join(format!("{method}_a")),
            dir.path().join(format!("{method}_b")),
        );
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--method",
            method,
            "--seed",
            "1",
            "--out",
            s(&a),
        ]);
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--method",
            method,
            "--seed",
            "1",
            "--out",
            s(&b),
        ]);
        let log = fs::read(a.join("train_log_seed1.jsonl")).unwrap();
        assert_eq!(log, fs::read(b.join("train_log_seed1.jsonl")).unwrap());
        assert_eq!(log.iter().filter(|&&c| c == b'\n').count(), 3);
        assert_eq!(
            fs::read(a.join("coreset_seed1.fbpa")).unwrap(),
            fs::read(b.join("coreset_seed1.fbpa")).unwrap()
        );
    }
    let snap: Value = serde_json::from_slice(
        &fs::read(dir.path().join("fbpc_isotropic_a/train_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(snap["fbpc"]["isotropic"], json!(true));
}

fn metrics(out: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    assert_eq!(r.headers().unwrap().get(0), Some("fbpc_metrics_v1"));
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn eval_reports_seeds_summary_and_corruptions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"seeds": [0, 1, 2, 3, 4]}));
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--method",
        "random",
        "--out",
        s(&out),
    ]);
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--method",
        "random",
        "--out",
        s(&out),
    ]);
    let rows = metrics(&out);
    assert_eq!(rows.iter().filter(|r| r[0] == "seed").count(), 5);
    let summary: Vec<_> = rows.iter().filter(|r| r[0] == "summary").collect();
    assert_eq!(summary.len(), 1);
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r[0] == "seed")
        .map(|r| r[5].parse().unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((summary[0][5].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!(summary[0][9].is_empty());
    let report: Value =
        serde_json::from_slice(&fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 5);
    assert!(report["seeds"][0]["clean"].get("degradation").is_none());

    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--method",
        "random",
        "--out",
        s(&out),
        "--corrupt",
        "gaussian_noise:3",
    ]);
    let report: Value =
        serde_json::from_slice(&fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    let corrupted = &report["seeds"][0]["corrupted"][0];
    assert_eq!(corrupted["corruption"], json!("gaussian_noise"));
    assert_eq!(corrupted["severity"], json!(3));
    assert!(corrupted["degradation"].is_number());
    let rows = metrics(&out);
    assert_eq!(rows.iter().filter(|r| r[0] == "summary").count(), 2);
    assert!(rows.iter().any(|r| r[0] == "summary" && !r[9].is_empty()));

    let bad = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--corrupt",
        "fog:3",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn compare_flags_incomplete_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (out, seeds) in [
        (&a, &["0", "1"][..]),
        (&b, &["0", "1"][..]),
        (&c, &["0"][..]),
    ] {
        let mut args = vec![
            "train",
            "--config",
            s(&cfg),
            "--method",
            "random",
            "--out",
            s(out),
        ];
        seeds.iter().for_each(|sd| args.extend(["--seed", sd]));
        ok(&args);
        args[0] = "eval";
        ok(&args);
    }
    let table = dir.path().join("t1");
    ok(&["compare", s(&a), s(&b), "--out", s(&table)]);
    let md = fs::read_to_string(table.join("compare.md")).unwrap();
    let lines: Vec<&str> = md.lines().skip(2).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    assert!(lines[0].contains("**"));

    let table = dir.path().join("t2");
    let out = run(&["compare", s(&a), s(&c), "--out", s(&table)]);
    assert_ne!(out.status.code(), Some(0));
    let csv = fs::read_to_string(table.join("compare.csv")).unwrap();
    assert!(csv.contains("incomplete"));

    fs::write(c.join("eval_report.json"), "{\"schema\": \"other\"}").unwrap();
    assert_eq!(
        run(&["compare", s(&a), s(&c), "--out", s(&table)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(
        run(&["train", "--config", s(&missing)]).status.code(),
        Some(3)
    );
    let cfg = write_config(dir.path(), json!({"seeds": []}));
    assert_eq!(
        run(&["train", "--config", s(&cfg), "--method", "random"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
