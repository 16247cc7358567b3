//! End-to-end tests of the command-line interface: output contracts of every
//! subcommand, config/flag precedence, determinism of artifacts, and the
//! failure modes (bad keys, conflicting sources, missing artifacts).

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stalemp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn stalemp")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small fast dataset shared by most tests.
const SBM: &[&str] = &["--synth-sbm", "n=40", "feat_dim=6", "--clusters", "4", "--hidden", "5"];

fn train_args<'a>(out_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train"];
    v.extend_from_slice(SBM);
    v.extend_from_slice(&["--epochs", "2", "--out", out_dir]);
    v.extend_from_slice(extra);
    v
}

fn read_metrics(dir: &Path) -> Vec<serde_json::Value> {
    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).expect("metrics.jsonl");
    text.lines()
        .map(|l| serde_json::from_str(l).expect("metrics line must be JSON"))
        .collect()
}

#[test]
fn train_writes_the_full_output_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert_ok(&run(&train_args(out_s, &["--seed", "3"])));

    // One metrics row per epoch with the full key set.
    let rows = read_metrics(&out);
    assert_eq!(rows.len(), 2);
    let keys = [
        "epoch",
        "task_loss",
        "stale_loss",
        "total_loss",
        "train_acc",
        "val_acc",
        "mean_persistence",
        "max_persistence",
        "mean_grad_staleness",
        "wall_ms",
    ];
    for (i, row) in rows.iter().enumerate() {
        let obj = row.as_object().unwrap();
        for k in keys {
            assert!(obj.contains_key(k), "metrics row missing {k}");
        }
        assert_eq!(row["epoch"].as_u64().unwrap(), i as u64 + 1);
        let task = row["task_loss"].as_f64().unwrap();
        let stale = row["stale_loss"].as_f64().unwrap();
        let total = row["total_loss"].as_f64().unwrap();
        assert!((task + 0.5 * stale - total).abs() < 1e-9, "total = task + lambda*stale");
    }
    // Epoch 1 has no drift anchors yet.
    assert_eq!(rows[0]["stale_loss"].as_f64().unwrap(), 0.0);

    // Config echo holds the resolved settings.
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["clusters"], 4);
    assert_eq!(echo["seed"], 3);
    assert_eq!(echo["lambda"], 0.5);

    // Summary with convergence block; final checkpoint pair.
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["total_steps"], 8);
    assert!(summary["convergence"]["lipschitz"].as_f64().unwrap() > 0.0);
    assert!(out.join("checkpoints/final.params.bin").is_file());
    assert!(out.join("checkpoints/final.history.bin").is_file());
}

#[test]
fn same_seed_reruns_are_identical_modulo_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_ok(&run(&train_args(a.to_str().unwrap(), &["--seed", "9"])));
    assert_ok(&run(&train_args(b.to_str().unwrap(), &["--seed", "9"])));
    assert_ok(&run(&train_args(c.to_str().unwrap(), &["--seed", "10"])));

    let strip = |dir: &Path| {
        read_metrics(dir)
            .into_iter()
            .map(|mut v| {
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b), "same seed must reproduce every metric");
    assert_ne!(strip(&a), strip(&c), "different seeds must differ");

    // The binary artifacts are bitwise identical too.
    let pa = std::fs::read(a.join("checkpoints/final.params.bin")).unwrap();
    let pb = std::fs::read(b.join("checkpoints/final.params.bin")).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn cadence_flags_write_periodic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let mut args = train_args(out_s, &["--checkpoint-every", "2", "--diagnose-every", "2"]);
    // 4 epochs so each cadence fires twice.
    let pos = args.iter().position(|a| *a == "--epochs").unwrap();
    args[pos + 1] = "4";
    assert_ok(&run(&args));

    for stem in ["epoch_0002", "epoch_0004"] {
        assert!(out.join(format!("checkpoints/{stem}.params.bin")).is_file());
        assert!(out.join(format!("checkpoints/{stem}.history.bin")).is_file());
        assert!(out.join(format!("diagnostics/{stem}.csv")).is_file());
        assert!(out.join(format!("diagnostics/{stem}.json")).is_file());
    }
    let diag: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("diagnostics/epoch_0004.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(diag["bound"]["violations"], 0);
    let csv = std::fs::read_to_string(out.join("diagnostics/epoch_0004.csv")).unwrap();
    assert!(csv.starts_with("node,layer,s_true,final_error,bound"));
}

#[test]
fn warm_start_resumes_from_saved_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    assert_ok(&run(&train_args(first.to_str().unwrap(), &["--seed", "4"])));

    // Continue with a vanishing learning rate: the resumed parameters stay
    // where the first run left them, so the full-graph accuracies must match
    // the first run's final numbers exactly.
    let first_s = first.to_str().unwrap();
    let mut args = train_args(second.to_str().unwrap(), &[
        "--seed",
        "4",
        "--warm-start",
        first_s,
        "--lr",
        "1e-12",
    ]);
    let pos = args.iter().position(|a| *a == "--epochs").unwrap();
    args[pos + 1] = "1";
    assert_ok(&run(&args));

    let read_summary = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p.join("summary.json")).unwrap()).unwrap()
    };
    let sa = read_summary(&first);
    let sb = read_summary(&second);
    assert_eq!(sa["final_train_acc"], sb["final_train_acc"]);
    assert_eq!(sa["final_val_acc"], sb["final_val_acc"]);
}

#[test]
fn warm_start_from_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("nothing");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("run");
    let empty_s = empty.to_str().unwrap();
    let result = run(&train_args(out.to_str().unwrap(), &["--warm-start", empty_s]));
    assert!(!result.status.success());
    let err = String::from_utf8_lossy(&result.stderr);
    assert!(err.contains("warm"), "stderr should name the warm-start problem: {err}");
}

#[test]
fn config_file_feeds_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"synth_sbm":{"n":40,"feat_dim":6},"clusters":4,"hidden":5,"epochs":3,"seed":6}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let result = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&result);
    assert_eq!(read_metrics(&out).len(), 1, "the flag must beat the file");
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 6, "file values fill whatever flags leave unset");
}

#[test]
fn train_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    // Unknown synthetic-dataset key.
    let r = run(&["train", "--synth-sbm", "widgets=3", "--out", out_s]);
    assert!(!r.status.success());

    // File dataset and synthetic dataset at once.
    let r = run(&[
        "train",
        "--synth-sbm",
        "n=30",
        "--edge-list",
        "does-not-matter.tsv",
        "--features",
        "x.bin",
        "--labels",
        "y.txt",
        "--out",
        out_s,
    ]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("error"), "diagnostic expected, got: {err}");
}

#[test]
fn synth_roundtrips_through_file_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert_ok(&run(&[
        "synth", "--synth-sbm", "n=40", "feat_dim=6", "--seed", "2", "--out", data_s,
    ]));
    for f in ["edges.tsv", "features.bin", "labels.txt"] {
        assert!(data.join(f).is_file(), "synth must write {f}");
    }

    // Same seed, same bytes.
    let data2 = dir.path().join("data2");
    assert_ok(&run(&[
        "synth",
        "--synth-sbm",
        "n=40",
        "feat_dim=6",
        "--seed",
        "2",
        "--out",
        data2.to_str().unwrap(),
    ]));
    for f in ["edges.tsv", "features.bin", "labels.txt"] {
        assert_eq!(
            std::fs::read(data.join(f)).unwrap(),
            std::fs::read(data2.join(f)).unwrap(),
            "{f} must be seed-deterministic"
        );
    }

    // The written files train.
    let out = dir.path().join("run");
    let edge = data.join("edges.tsv");
    let feats = data.join("features.bin");
    let labels = data.join("labels.txt");
    let r = run(&[
        "train",
        "--edge-list",
        edge.to_str().unwrap(),
        "--features",
        feats.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--clusters",
        "4",
        "--hidden",
        "5",
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&r);
    assert_eq!(read_metrics(&out).len(), 1);
}

#[test]
fn sweep_runs_the_grid_and_aggregates_one_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["sweep"];
    args.extend_from_slice(SBM);
    args.extend_from_slice(&[
        "--epochs",
        "1",
        "--out",
        out_s,
        "--grid-lambda",
        "0.1,0.5",
        "--grid-components",
        "on,off",
    ]);
    let r = run(&args);
    assert_ok(&r);

    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4, "header plus one row per grid cell");
    assert!(lines[0].starts_with("cell,components,lambda,batch_clusters,augment"));
    for row in &lines[1..] {
        assert!(row.ends_with(",ok"), "cell should succeed: {row}");
    }
    for cell in [
        "comp-on_lam-0.1_bc-1_aug-concat",
        "comp-off_lam-0.5_bc-1_aug-concat",
    ] {
        assert!(
            out.join("cells").join(cell).join("summary.json").is_file(),
            "per-cell outputs must exist for {cell}"
        );
        assert!(csv.contains(cell));
    }
}

#[test]
fn sweep_with_empty_grid_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"synth_sbm":{"n":30},"clusters":3,"epochs":1,"grid_lambda":[]}"#,
    )
    .unwrap();
    let out = dir.path().join("sweep");
    let r = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("empty sweep"), "got: {err}");
}

#[test]
fn diagnose_validates_saved_artifacts_and_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let train_out = dir.path().join("run");
    let train_out_s = train_out.to_str().unwrap();
    assert_ok(&run(&train_args(train_out_s, &["--seed", "5"])));

    let params = train_out.join("checkpoints/final.params.bin");
    let history = train_out.join("checkpoints/final.history.bin");
    let diag_out = dir.path().join("diag");

    // Healthy snapshot: exit 0, diagnostics written, convergence null.
    let mut args = vec!["diagnose"];
    args.extend_from_slice(SBM);
    let (params_s, history_s) = (params.to_str().unwrap(), history.to_str().unwrap());
    let diag_out_s = diag_out.to_str().unwrap();
    args.extend_from_slice(&[
        "--seed", "5", "--params", params_s, "--history", history_s, "--out", diag_out_s,
    ]);
    let r = run(&args);
    assert_ok(&r);
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(diag_out.join("diagnostics.json")).unwrap())
            .unwrap();
    assert_eq!(diag["bound"]["violations"], 0);
    assert!(
        diag["convergence"].is_null(),
        "a standalone snapshot carries no first-epoch gradient samples"
    );
    assert!(diag_out.join("diagnostics.csv").is_file());

    // Missing artifact: clean error.
    let missing = dir.path().join("nope.bin");
    let missing_s = missing.to_str().unwrap();
    let mut args = vec!["diagnose"];
    args.extend_from_slice(SBM);
    args.extend_from_slice(&[
        "--seed", "5", "--params", missing_s, "--history", history_s, "--out", diag_out_s,
    ]);
    let r = run(&args);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing artifact"));

    // Truncated parameter container: clean error, nonzero exit.
    let broken = dir.path().join("broken.params.bin");
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    let broken_s = broken.to_str().unwrap();
    let mut args = vec!["diagnose"];
    args.extend_from_slice(SBM);
    args.extend_from_slice(&[
        "--seed", "5", "--params", broken_s, "--history", history_s, "--out", diag_out_s,
    ]);
    let r = run(&args);
    assert!(!r.status.success());
}
