use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nm-slope");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("NM_SLOPE_THREADS").output().unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

const MLP: &str = "model.kind = mlp\nmodel.layers = 2\nmodel.hidden = 16\nmodel.input_dim = 8\nmodel.output_dim = 4\nsparsity.dense_head = false\ntrain.iterations = 40\ntrain.batch = 8\ndata.samples = 128\noptimizer.lr = 0.01\n";

#[test]
fn flops_ratio_for_2_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report-flops", "--pattern", "2:4", "--rank", "0"], dir.path());
    assert!(out.status.success());
    let csv = read(dir.path(), "out/flops.csv");
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[8], "0.5");
    assert!(csv.lines().last().unwrap().starts_with("# config-hash "));
}

#[test]
fn lemma_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify-lemma", "--patterns", "1:2,2:4,2:8", "--trials", "10", "--side", "64"], dir.path());
    assert!(out.status.success());
    let csv = read(dir.path(), "out/lemma.csv");
    let analytic: Vec<f64> = csv.lines().skip(1).take(3).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(analytic[..2], [0.125, 0.09375]);
    assert!((analytic[2] - 0.0583992).abs() < 1e-6);
    assert_eq!(csv.lines().next().unwrap(), "pattern,analytic,empirical,std_error,z_score");
}

#[test]
fn memory_report_lists_both_readings() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["report-memory"], dir.path()).status.success());
    let csv = read(dir.path(), "out/memory.csv");
    assert!(csv.contains("training_per_value,262,384,"));
    assert!(csv.contains("training_as_listed,230,384,"));
    assert!(csv.contains("68%"));
    assert!(csv.contains("inference,,,0.546875,"));
}

#[test]
fn train_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("mlp.cfg"), MLP).unwrap();
    let a = run(&["train", "--config", "mlp.cfg", "--seed", "1", "--out", "a"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = Command::new(BIN)
        .args(["train", "--config", "mlp.cfg", "--seed", "1", "--out", "b"])
        .current_dir(dir.path())
        .env("NM_SLOPE_THREADS", "2")
        .output()
        .unwrap();
    assert!(b.status.success());
    assert_eq!(read(dir.path(), "a/loss.csv"), read(dir.path(), "b/loss.csv"));
    let c = run(&["train", "--config", "mlp.cfg", "--seed", "2", "--out", "c"], dir.path());
    assert!(c.status.success());
    assert_ne!(read(dir.path(), "a/loss.csv"), read(dir.path(), "c/loss.csv"));
    assert!(dir.path().join("a/checkpoint/manifest.json").exists());
    let summary: serde_json::Value = serde_json::from_str(&read(dir.path(), "a/summary.json")).unwrap();
    assert_eq!(summary["iterations"], 40);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.cfg"), "model.kind = mlp\nmodel.bogus = 3\n").unwrap();
    let out = run(&["train", "--config", "bad.cfg"], p);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    let out = run(&["train", "--config", "missing.cfg"], p);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "io");

    std::fs::write(p.join("div.cfg"), "model.kind = mlp\noptimizer.kind = sgd\noptimizer.lr = 1000\ntrain.iterations = 300\n").unwrap();
    let out = run(&["train", "--config", "div.cfg"], p);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "divergence");

    let out = run(&["report-flops", "--pattern", "2-4"], p);
    assert_eq!(out.status.code(), Some(2));
    error_json(&out);

    assert_eq!(run(&[], p).status.code(), Some(2));
    assert_eq!(run(&["--help"], p).status.code(), Some(0));

    // the output path is an existing file
    std::fs::write(p.join("blocked"), "").unwrap();
    let out = run(&["report-flops", "--out", "blocked"], p);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn sweep_requires_even_blocks_and_sorts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("odd.cfg"), MLP.replace("model.layers = 2", "model.layers = 3")).unwrap();
    let out = run(&["sweep-mixed-nm", "--config", "odd.cfg"], p);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(p.join("even.cfg"), MLP.replace("model.output_dim = 4", "model.output_dim = 8")).unwrap();
    let out = run(&["sweep-mixed-nm", "--config", "even.cfg"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(p, "out/sweep.csv");
    assert_eq!(nmslope_cli::densest_label(&csv), Some("2:4-2:4"));
    assert!(csv.contains("# densest 2:4-2:4"));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).take(3).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[1][1], rows[2][1], "mixed variants share density");
    let (l1, l2): (f64, f64) = (rows[1][2].parse().unwrap(), rows[2][2].parse().unwrap());
    assert!(l1.is_finite() && l2.is_finite() && l1 <= l2);
    let again = run(&["sweep-mixed-nm", "--config", "even.cfg", "--out", "again"], p);
    assert!(again.status.success());
    assert_eq!(csv, read(p, "again/sweep.csv"));
}
