//! End-to-end subcommand tests against the built binary. Everything runs on
//! deliberately tiny grids so the whole file stays in the seconds range.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xev() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xev"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn xev");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

/// Tiny but chaotic CGLE setup: 16x16 grid, short run.
fn tiny_sim_config(dir: &Path, out: &Path) -> PathBuf {
    write_config(
        dir,
        &format!(
            r#"
seed = 5
out_dir = "{}"

[sim]
nx = 16
ny = 16
dt = 5e-4
warmup_time = 2.0
duration = 8.0

[label]
threshold = "3.0"
p = 5
"#,
            out.display()
        ),
    )
}

fn manifest_value(path: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("missing {key} in {}", path.display()))
        .to_string()
}

#[test]
fn simulate_writes_container_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg = tiny_sim_config(dir.path(), &out_a);
    run_ok(xev().args(["simulate", "--config"]).arg(&cfg));
    run_ok(xev()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_b));
    let sum_a = manifest_value(&out_a.join("manifest-simulate.txt"), "container_sha256");
    let sum_b = manifest_value(&out_b.join("manifest-simulate.txt"), "container_sha256");
    assert_eq!(sum_a, sum_b, "same seed must give identical containers");
    assert!(out_a.join("cgle.xevd").exists());
    assert!(out_a.join("effective-config.toml").exists());
}

#[test]
fn different_seed_changes_container() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg = tiny_sim_config(dir.path(), &out_a);
    run_ok(xev().args(["simulate", "--config"]).arg(&cfg));
    run_ok(xev()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--seed", "6"])
        .arg("--out")
        .arg(&out_b));
    let sum_a = manifest_value(&out_a.join("manifest-simulate.txt"), "container_sha256");
    let sum_b = manifest_value(&out_b.join("manifest-simulate.txt"), "container_sha256");
    assert_ne!(sum_a, sum_b);
}

#[test]
fn invalid_dt_fails_validation_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let cfg = write_config(
        dir.path(),
        &format!(
            "out_dir = \"{}\"\n[sim]\ndt = -1.0\n",
            out.display()
        ),
    );
    let res = xev()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("validation"));
}

#[test]
fn missing_container_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let cfg = tiny_sim_config(dir.path(), &out);
    let res = xev()
        .args(["label", "--config"])
        .arg(&cfg)
        .args(["--container", "/nonexistent/f.xevd"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn storm_pipeline_label_train_evaluate_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
seed = 11
out_dir = "{}"

[label]
mode = "dls"
threshold = "beaufort10"
days = 1
steps_per_day = 4

[train]
learning_rate = 2e-3
batch_size = 32
epochs = 2
split_fraction = 0.7
"#,
            out.display()
        ),
    );
    run_ok(xev()
        .args(["synth-storms", "--config"])
        .arg(&cfg)
        .args(["--frames", "1200", "--rate", "0.08", "--ny", "16", "--nx", "16"]));
    let container = out.join("storms.xevd");
    assert!(container.exists());

    // label: histogram covers both classes and matches entry count
    run_ok(xev()
        .args(["label", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(&container));
    let manifest = out.join("manifest-label.txt");
    let hist: Vec<usize> = manifest_value(&manifest, "class_histogram")
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let entries: usize = manifest_value(&manifest, "entries").parse().unwrap();
    assert_eq!(hist.iter().sum::<usize>(), entries);
    assert_eq!(entries, 1200);
    assert!(hist[1] > 0, "no positive labels: {hist:?}");
    // dls days=1 at 6-hour cadence -> p=4 in the manifest
    assert_eq!(manifest_value(&manifest, "horizon_p"), "4");
    assert!(out.join("labels.csv").exists());

    // train
    run_ok(xev()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(&container));
    assert!(out.join("model.ckpt").exists());
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,test_loss,test_metric"));
    assert_eq!(history.lines().count(), 3); // header + 2 epochs

    // deterministic retrain -> identical history
    let out2 = dir.path().join("run2");
    run_ok(xev()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(&container)
        .arg("--out")
        .arg(&out2));
    let history2 = std::fs::read_to_string(out2.join("history.csv")).unwrap();
    assert_eq!(history, history2);

    // evaluate
    run_ok(xev()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out.join("model.ckpt"))
        .arg("--container")
        .arg(&container));
    let roc = std::fs::read_to_string(out.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr"));
    assert!(out.join("confusion.csv").exists());
    assert!(out.join("horizon.csv").exists());
    let auc: f64 = manifest_value(&out.join("manifest-evaluate.txt"), "auc")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&auc));

    // ensemble of 2 replicas
    run_ok(xev()
        .args(["ensemble", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(&container)
        .args(["--replicas", "2"]));
    let ens = std::fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert!(ens.starts_with("epoch,train_loss_mean,train_loss_std"));
    assert_eq!(ens.lines().count(), 3);
}

#[test]
fn where_mode_emits_confusion_and_topk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
seed = 23
out_dir = "{}"

[label]
mode = "where"
threshold = "beaufort10"
p = 3
g = 2

[train]
learning_rate = 2e-3
batch_size = 16
epochs = 2
split_fraction = 0.7
balance = false
"#,
            out.display()
        ),
    );
    run_ok(xev()
        .args(["synth-storms", "--config"])
        .arg(&cfg)
        .args(["--frames", "2400", "--rate", "0.1", "--ny", "16", "--nx", "16"]));
    let container = out.join("storms.xevd");
    run_ok(xev()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(&container));
    run_ok(xev()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out.join("model.ckpt"))
        .arg("--container")
        .arg(&container));
    let topk = std::fs::read_to_string(out.join("topk.csv")).unwrap();
    let accs: Vec<f64> = topk
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(accs.len(), 4);
    assert!(accs.windows(2).all(|w| w[1] >= w[0]), "topk not monotone: {accs:?}");
    assert_eq!(accs[3], 1.0);
    let confusion = std::fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert!(confusion.starts_with("actual,pred_0,pred_1,pred_2,pred_3"));
}

#[test]
fn head_task_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let when_cfg = write_config(
        dir.path(),
        &format!(
            "seed = 3\nout_dir = \"{}\"\n[label]\nmode = \"dls\"\nthreshold = \"beaufort10\"\n[train]\nepochs = 1\nbatch_size = 32\nsplit_fraction = 0.7\n",
            out.display()
        ),
    );
    run_ok(xev()
        .args(["synth-storms", "--config"])
        .arg(&when_cfg)
        .args(["--frames", "800", "--rate", "0.08", "--ny", "16", "--nx", "16"]));
    let container = out.join("storms.xevd");
    run_ok(xev()
        .args(["train", "--config"])
        .arg(&when_cfg)
        .arg("--container")
        .arg(&container));
    // same checkpoint, but a "where" task config
    let where_cfg = dir.path().join("where.toml");
    std::fs::write(
        &where_cfg,
        format!(
            "seed = 3\nout_dir = \"{}\"\n[label]\nmode = \"where\"\nthreshold = \"beaufort10\"\np = 3\ng = 2\n[train]\nsplit_fraction = 0.7\nbalance = false\n",
            out.display()
        ),
    )
    .unwrap();
    let res = xev()
        .args(["evaluate", "--config"])
        .arg(&where_cfg)
        .arg("--checkpoint")
        .arg(out.join("model.ckpt"))
        .arg("--container")
        .arg(&container)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("mismatch"));
}

#[test]
fn wind_ingest_validates_calendar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!("out_dir = \"{}\"\n", out.display()),
    );
    // 1200 frames at 4/day = 300 days
    run_ok(xev()
        .args(["synth-storms", "--config"])
        .arg(&cfg)
        .args(["--frames", "1200", "--rate", "0.05", "--ny", "16", "--nx", "16"]));
    run_ok(xev()
        .args(["wind-ingest", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(out.join("storms.xevd"))
        .arg("--meta")
        .arg(out.join("storms-meta.txt")));
    let manifest = out.join("manifest-wind-ingest.txt");
    assert_eq!(manifest_value(&manifest, "frames"), "1200");
    assert_eq!(manifest_value(&manifest, "dls_1day_steps"), "4");
    assert_eq!(manifest_value(&manifest, "dls_3day_steps"), "12");

    // truncated meta span -> validation failure
    let bad_meta = out.join("bad-meta.txt");
    let meta_text = std::fs::read_to_string(out.join("storms-meta.txt")).unwrap();
    std::fs::write(&bad_meta, meta_text.replace("end_date=2000-10-26", "end_date=2000-10-25"))
        .unwrap();
    let res = xev()
        .args(["wind-ingest", "--config"])
        .arg(&cfg)
        .arg("--container")
        .arg(out.join("storms.xevd"))
        .arg("--meta")
        .arg(&bad_meta)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn diagnostics_lyapunov_linear_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // linear regime: every mode grows at exactly eps
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
seed = 2
out_dir = "{}"

[sim]
nx = 16
ny = 16
gamma = 0.0
alpha = 0.0
mu = 0.0
beta = 0.0
dt = 1e-3
warmup_time = 0.5
duration = 3.0
"#,
            out.display()
        ),
    );
    run_ok(xev()
        .args(["diagnostics", "--config"])
        .arg(&cfg)
        .args(["--mode", "lyapunov", "--n-renorms", "20"]));
    let lambda: f64 = manifest_value(&out.join("manifest-diagnostics.txt"), "lambda_max")
        .parse()
        .unwrap();
    assert!((lambda - 1.0).abs() < 0.01, "lambda {lambda}");
}

#[test]
fn diagnostics_correlation_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_sim_config(dir.path(), &out);
    run_ok(xev()
        .args(["diagnostics", "--config"])
        .arg(&cfg)
        .args(["--mode", "correlation"]));
    let csv = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert!(csv.starts_with("lag_steps,c_st"));
    let tau: f64 = manifest_value(&out.join("manifest-diagnostics.txt"), "tau_c_steps")
        .parse()
        .unwrap();
    assert!(tau.is_finite() && tau > 0.0);
}
