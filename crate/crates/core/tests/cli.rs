//! The command-line pipeline on a small config: artifacts, exit codes and
//! refusal of mismatched inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_metatransfer");

const CONFIG: &str = r#"
target_train_size = 20
baselines = ["ha", "ridge"]
ablations = [{ variant = "full" }, { variant = "no_transfer" }]

[benchmark]
seed = 5
source_transactions = 300
target_transactions = 200

[trainer]
epochs = 1
iterations_per_epoch = 2
query_batch_cap = 16

[model]
state_dim = 8
fi_hidden = [8, 4]

[eval.adapt]
max_steps = 20

[eval.target_only]
max_steps = 20
"#;

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn pipeline_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = tmp.path().join("out");

    assert_eq!(code(&run("evaluate", &cfg, &out, &[])), 3, "evaluate before train");
    assert_eq!(code(&run("train", &cfg, &out, &[])), 3, "train before generate");

    for cmd in ["generate", "train", "evaluate", "weights-report", "ablate"] {
        let o = run(cmd, &cfg, &out, &[]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "data/manifest.json",
        "data/city_10_transactions.csv",
        "train/theta.mtck",
        "train/wgn.mtck",
        "train/weight_log.csv",
        "train/manifest.json",
        "results.csv",
        "ablation/results.csv",
        "weights/summary.csv",
        "weights/cities.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 4, "{results}");
    let ablation = fs::read_to_string(out.join("ablation/results.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 3, "{ablation}");

    // a different benchmark seed no longer matches the generated data
    assert_eq!(code(&run("train", &cfg, &out, &["--seed", "6"])), 2);

    // tampered data is refused
    let tx = out.join("data/city_1_transactions.csv");
    let mut text = fs::read_to_string(&tx).unwrap();
    text.push('\n');
    fs::write(&tx, text).unwrap();
    assert_eq!(code(&run("train", &cfg, &out, &[])), 2);
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "target_train_size = 20\n[benchmark]\nseed = 1\nsede = 2\n").unwrap();
    let o = run("generate", &cfg, &out, &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));

    assert_eq!(code(&run("generate", &tmp.path().join("absent.toml"), &out, &[])), 2);

    fs::write(&cfg, "target_train_size = 20\n[benchmark]\nseed = 1\n[trainer]\nalpha = -1.0\n").unwrap();
    assert_eq!(code(&run("generate", &cfg, &out, &[])), 2);
}

#[test]
fn weights_report_without_training_is_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&run("generate", &cfg, &out, &[])), 0);
    assert_eq!(code(&run("weights-report", &cfg, &out, &[])), 3);
}
