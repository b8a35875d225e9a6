use std::path::Path;
use std::process::{Command, Output};

use debias_cli::report::load_csv;
use debias_core::synth::SynthDataset;

fn debias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(args)
        .env_remove("DEBIAS_PARALLELISM")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_body(dir: &Path, extra: &str) -> String {
    format!(
        r#"{{"n_train": 500, "n_test": 200, "epochs": 2, "hidden": 6, "base_dim": 3,
            "bias_kind": "indicator", "methods": ["none", "bias_product"], "seeds": [0, 1],
            "output_csv": "{}", "output_markdown": "{}"{extra}}}"#,
        dir.join("raw.csv").display(),
        dir.join("table.md").display()
    )
}

#[test]
fn sweep_writes_csv_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_body(dir.path(), ""));
    let out = debias(&["sweep", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = load_csv(&dir.path().join("raw.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    let md = std::fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert!(md.starts_with("| Method | Indicator Acc. | Indicator w/Bias |"));
    assert!(md.contains("| None |") && md.contains("| Bias Product |"));

    let first = std::fs::read(dir.path().join("raw.csv")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(["sweep", "--config", &cfg])
        .env("DEBIAS_PARALLELISM", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("raw.csv")).unwrap(), first);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seeds": [0], "epoch": 3}"#);
    let out = debias(&["sweep", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let missing = dir.path().join("nope.json");
    assert_eq!(debias(&["sweep", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write_config(dir.path(), &tiny_body(dir.path(), ""));
    assert_eq!(debias(&["run", "--config", &cfg, "--method", "product", "--seed", "0"]).status.code(), Some(2));
    assert_eq!(debias(&["sweep", "--config", &cfg, "--lambda-h", "dependent"]).status.code(), Some(2));
    assert_eq!(debias(&["sweep", "--config", &cfg, "--lambda-h", "dependent=-1"]).status.code(), Some(2));
    let bad_env = Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(["sweep", "--config", &cfg])
        .env("DEBIAS_PARALLELISM", "many")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn failed_rows_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_body(dir.path(), r#", "learning_rate": 1.7976931348623157e308"#));
    let out = debias(&["sweep", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
    let rows = load_csv(&dir.path().join("raw.csv")).unwrap();
    assert!(rows.iter().all(|r| r.failed()));

    let analyze = debias(&["analyze", "--csv", dir.path().join("raw.csv").to_str().unwrap()]);
    assert_eq!(analyze.status.code(), Some(1));
}

#[test]
fn run_prints_one_row_per_bias_kind() {
    let dir = tempfile::tempdir().unwrap();
    let body = tiny_body(dir.path(), "").replace(r#""bias_kind": "indicator""#, r#""bias_kind": ["indicator", "dependent"]"#);
    let cfg = write_config(dir.path(), &body);
    let out = debias(&["run", "--config", &cfg, "--method", "learned_mixin", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("indicator-learned_mixin-s3,learned_mixin,indicator,3,"));
    assert!(lines[2].starts_with("dependent-learned_mixin-s3,"));

    let json = debias(&["run", "--config", &cfg, "--method", "learned_mixin", "--seed", "3", "--json"]);
    let first: serde_json::Value = serde_json::from_slice(json.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert!(first["metrics"]["g_mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn analyze_recomputes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_body(dir.path(), ""));
    assert_eq!(debias(&["sweep", "--config", &cfg]).status.code(), Some(0));
    let md_path = dir.path().join("again.md");
    let out = debias(&[
        "analyze",
        "--csv",
        dir.path().join("raw.csv").to_str().unwrap(),
        "--markdown",
        md_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let original = std::fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), original);
    assert_eq!(std::fs::read_to_string(md_path).unwrap(), original);
}

#[test]
fn gen_dumps_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_body(dir.path(), ""));
    let out_dir = dir.path().join("data");
    let out = debias(&["gen", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for seed in [0, 1] {
        for split in ["train", "in_domain_test", "ood_test"] {
            let ds = SynthDataset::load(&out_dir.join(format!("indicator-s{seed}-{split}.json"))).unwrap();
            assert_eq!(ds.len(), if split == "train" { 500 } else { 200 });
        }
    }
}

#[test]
fn gradcheck_command_passes() {
    let out = debias(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["none", "reweight", "bias_product", "learned_mixin", "learned_mixin_h", "binary_ensemble"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name} missing:\n{text}");
    }
}
