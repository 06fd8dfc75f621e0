//! `xev` — pipeline driver: simulate, label, train, evaluate, report.
//!
//! Every subcommand is deterministic given identical config+seed and leaves
//! a manifest tracing its outputs to input checksums and the config hash.
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

mod config;
mod manifest;
mod pipeline;

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use config::RunConfig;
use manifest::{prepare_out_dir, Manifest};
use xev_core::eval;
use xev_core::labeling::EventRecord;
use xev_core::net::{self, HeadKind};
use xev_core::sim::{self, FrameSet};
use xev_core::store;
use xev_core::wind;

#[derive(Debug)]
pub enum CliError {
    /// Bad config or input detected before long-running work; exit 1.
    Validation(String),
    /// Failure mid-run (io, divergence, non-finite loss); exit 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "xev", about = "Extreme-event prediction pipeline", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recorded in the manifest; execution is single-threaded and
    /// deterministic either way.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the field simulation and write a frame container.
    Simulate,
    /// Detect events and write a label sidecar plus class histogram.
    Label {
        #[arg(long)]
        container: PathBuf,
    },
    /// Train the classifier on a labeled container.
    Train {
        #[arg(long)]
        container: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        container: PathBuf,
        /// Operating point at this FPR instead of probability 0.5.
        #[arg(long)]
        target_fpr: Option<f64>,
    },
    /// Train n seeded replicas and aggregate their histories.
    Ensemble {
        #[arg(long)]
        container: PathBuf,
        #[arg(long, default_value_t = 3)]
        replicas: usize,
    },
    /// Validate a wind container against calendar metadata.
    WindIngest {
        #[arg(long)]
        container: PathBuf,
        #[arg(long)]
        meta: PathBuf,
    },
    /// Generate synthetic storm frames plus geo metadata.
    SynthStorms {
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        #[arg(long, default_value_t = 0.05)]
        rate: f64,
        #[arg(long, default_value_t = 0.0)]
        bias: f64,
        #[arg(long, default_value_t = 32)]
        ny: usize,
        #[arg(long, default_value_t = 32)]
        nx: usize,
        #[arg(long, default_value_t = 4)]
        steps_per_day: usize,
    },
    /// Field diagnostics: correlation, periods, or lyapunov.
    Diagnostics {
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 40)]
        n_renorms: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xev: {e}");
            match e {
                CliError::Validation(_) => ExitCode::from(1),
                CliError::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let config_hash = prepare_out_dir(&out_dir, &cfg.effective_toml())?;

    match &cli.cmd {
        Cmd::Simulate => cmd_simulate(&cfg, &out_dir, &config_hash),
        Cmd::Label { container } => cmd_label(&cfg, container, &out_dir, &config_hash),
        Cmd::Train { container } => cmd_train(&cfg, container, &out_dir, &config_hash),
        Cmd::Evaluate {
            checkpoint,
            container,
            target_fpr,
        } => cmd_evaluate(&cfg, checkpoint, container, *target_fpr, &out_dir, &config_hash),
        Cmd::Ensemble {
            container,
            replicas,
        } => cmd_ensemble(&cfg, container, *replicas, &out_dir, &config_hash),
        Cmd::WindIngest { container, meta } => {
            cmd_wind_ingest(&cfg, container, meta, &out_dir, &config_hash)
        }
        Cmd::SynthStorms {
            frames,
            rate,
            bias,
            ny,
            nx,
            steps_per_day,
        } => cmd_synth_storms(
            &cfg,
            *frames,
            *rate,
            *bias,
            (*ny, *nx),
            *steps_per_day,
            &out_dir,
            &config_hash,
        ),
        Cmd::Diagnostics { mode, n_renorms } => {
            cmd_diagnostics(&cfg, mode, *n_renorms, &out_dir, &config_hash)
        }
    }
}

fn read_container(path: &Path) -> Result<FrameSet, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "container {} does not exist",
            path.display()
        )));
    }
    store::read_frames(path).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_simulate(cfg: &RunConfig, out_dir: &Path, config_hash: &str) -> Result<(), CliError> {
    let params = cfg.sim.to_params(cfg.seed);
    let start = std::time::Instant::now();
    let frames = sim::integrate_and_sample(&params, cfg.sim.duration)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let wall = start.elapsed().as_secs_f64();
    let container = out_dir.join("cgle.xevd");
    store::write_frames(&frames, &container).map_err(|e| CliError::Runtime(e.to_string()))?;

    let maxima = frames.frame_maxima();
    let global_max = maxima.iter().copied().fold(f32::MIN, f32::max);
    let mean_max = maxima.iter().sum::<f32>() / maxima.len() as f32;
    let mut m = Manifest::new("simulate", cfg.seed);
    m.push("config_hash", config_hash);
    m.push("frames", maxima.len());
    m.push("global_max_abs", global_max);
    m.push("mean_frame_max", mean_max);
    m.push("divergence", "none");
    m.push("wall_time_s", format!("{wall:.3}"));
    m.push_file("container", &container)?;
    m.write(out_dir, "simulate")?;
    println!(
        "simulate: {} frames, max|u| {global_max:.3}, mean frame max {mean_max:.3}",
        maxima.len()
    );
    Ok(())
}

fn cmd_label(
    cfg: &RunConfig,
    container: &Path,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    let frames = Arc::new(read_container(container)?);
    // Label over the full set: no split here, just the sidecar + histogram.
    let mut no_split = cfg.clone();
    no_split.train.balance = false;
    let ds = pipeline::build_dataset(Arc::clone(&frames), &no_split)?;
    let full_entries: Vec<_> = ds
        .train
        .entries
        .iter()
        .chain(&ds.test.entries)
        .copied()
        .collect();
    let mut sorted = full_entries.clone();
    sorted.sort();
    let sidecar = out_dir.join("labels.csv");
    store::write_sidecar(&sorted, &sidecar).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut hist = vec![0usize; ds.n_classes];
    for e in &sorted {
        hist[e.class_label] += 1;
    }
    let hist_text = hist
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mut m = Manifest::new("label", cfg.seed);
    m.push("config_hash", config_hash);
    m.push_file("input_container", container)?;
    m.push("mode", &cfg.label.mode);
    m.push("threshold", ds.threshold);
    m.push("horizon_p", ds.horizon);
    m.push("events", ds.events.len());
    m.push("entries", sorted.len());
    m.push("class_histogram", &hist_text);
    m.push_file("sidecar", &sidecar)?;
    m.write(out_dir, "label")?;
    println!(
        "label: mode={} threshold={} p={} events={} class_histogram={hist_text}",
        cfg.label.mode,
        ds.threshold,
        ds.horizon,
        ds.events.len()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    container: &Path,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    let frames = Arc::new(read_container(container)?);
    let ds = pipeline::build_dataset(Arc::clone(&frames), cfg)?;
    let start = std::time::Instant::now();
    let outcome = pipeline::run_training(&ds, &frames, cfg, cfg.seed)?;
    let wall = start.elapsed().as_secs_f64();

    let ckpt = out_dir.join("model.ckpt");
    net::save_checkpoint(&outcome.best, &ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;
    let history = out_dir.join("history.csv");
    pipeline::write_history_csv(&outcome, &history)?;

    let best = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .expect("best epoch is in the history");
    let mut m = Manifest::new("train", cfg.seed);
    m.push("config_hash", config_hash);
    m.push_file("input_container", container)?;
    m.push("train_entries", ds.train.len());
    m.push("test_entries", ds.test.len());
    m.push("best_epoch", outcome.best_epoch);
    m.push("best_metric", best.test_metric);
    m.push("wall_time_s", format!("{wall:.3}"));
    m.push_file("checkpoint", &ckpt)?;
    m.push_file("history", &history)?;
    m.write(out_dir, "train")?;
    println!(
        "train: {} epochs, best metric {:.4} at epoch {}",
        outcome.history.len(),
        best.test_metric,
        outcome.best_epoch
    );
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    container: &Path,
    target_fpr: Option<f64>,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    let frames = Arc::new(read_container(container)?);
    let ds = pipeline::build_dataset(Arc::clone(&frames), cfg)?;
    let model = net::load_checkpoint(checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    if model.head_kind() != ds.head() {
        return Err(CliError::Validation(format!(
            "head/task mismatch: checkpoint has {:?}, task needs {:?}",
            model.head_kind(),
            ds.head()
        )));
    }
    let scale = ds.threshold as f32;
    let (x_test, y_test) = ds.test.to_tensor(scale);
    let probs = pipeline::predict(&model, &x_test)?;

    let mut m = Manifest::new("evaluate", cfg.seed);
    m.push("config_hash", config_hash);
    m.push_file("checkpoint", checkpoint)?;
    m.push_file("input_container", container)?;
    m.push("test_entries", ds.test.len());

    // per-frame correctness for the horizon profile
    let n_frames = frames.frames.len();
    let mut correct = vec![false; n_frames];
    let test_start = ds
        .test
        .entries
        .first()
        .map(|e| e.frame_index)
        .unwrap_or(n_frames);

    match ds.head() {
        HeadKind::Sigmoid => {
            let scores: Vec<f64> = probs.column(0).iter().map(|&p| p as f64).collect();
            let bin: Vec<u8> = y_test.iter().map(|&l| l as u8).collect();
            let roc =
                eval::roc_curve(&scores, &bin).map_err(|e| CliError::Runtime(e.to_string()))?;
            let roc_path = out_dir.join("roc.csv");
            let mut buf = Vec::new();
            roc.write_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(&roc_path, buf).map_err(|e| CliError::Runtime(e.to_string()))?;
            let threshold = match target_fpr {
                Some(f) => roc.threshold_at_fpr(f),
                None => 0.5,
            };
            let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= threshold)).collect();
            let cm = eval::confusion(&preds, &y_test, 2)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let cm_path = out_dir.join("confusion.csv");
            let mut buf = Vec::new();
            cm.write_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(&cm_path, buf).map_err(|e| CliError::Runtime(e.to_string()))?;
            let (tp, fp, fn_, tn) = cm.binary_counts();
            for (e, (&p, &y)) in ds.test.entries.iter().zip(preds.iter().zip(&y_test)) {
                correct[e.frame_index] = p == y;
            }
            m.push("auc", roc.auc);
            m.push("operating_threshold", threshold);
            if let Ok((tpr, fpr, acc)) = eval::rates(tp, fp, fn_, tn) {
                m.push("tpr", tpr);
                m.push("fpr", fpr);
                m.push("accuracy", acc);
            }
            m.push_file("roc", &roc_path)?;
            m.push_file("confusion", &cm_path)?;
            println!("evaluate: auc {:.4} over {} test samples", roc.auc, y_test.len());
        }
        HeadKind::Softmax(classes) => {
            let rows: Vec<Vec<f64>> = probs
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let preds: Vec<usize> = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect();
            let cm = eval::confusion(&preds, &y_test, classes)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let cm_path = out_dir.join("confusion.csv");
            let mut buf = Vec::new();
            cm.write_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(&cm_path, buf).map_err(|e| CliError::Runtime(e.to_string()))?;
            let topk_path = out_dir.join("topk.csv");
            let mut text = String::from("k,mean_accuracy\n");
            for k in 1..=classes {
                let acc = eval::topk_accuracy(&rows, &y_test, k)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                text.push_str(&format!("{k},{}\n", acc.mean));
            }
            std::fs::write(&topk_path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
            for (e, (&p, &y)) in ds.test.entries.iter().zip(preds.iter().zip(&y_test)) {
                correct[e.frame_index] = p == y;
            }
            m.push("overall_accuracy", cm.overall_accuracy());
            m.push_file("confusion", &cm_path)?;
            m.push_file("topk", &topk_path)?;
            println!(
                "evaluate: accuracy {:.4} over {} test samples",
                cm.overall_accuracy(),
                y_test.len()
            );
        }
    }

    let test_events: Vec<EventRecord> = ds
        .events
        .iter()
        .filter(|e| e.frame_index >= test_start + ds.horizon)
        .cloned()
        .collect();
    let profile = eval::horizon_profile(&correct, &test_events, ds.horizon);
    let horizon_path = out_dir.join("horizon.csv");
    let mut buf = Vec::new();
    profile
        .write_csv(&mut buf)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(&horizon_path, buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    m.push_file("horizon", &horizon_path)?;
    m.write(out_dir, "evaluate")?;
    Ok(())
}

fn cmd_ensemble(
    cfg: &RunConfig,
    container: &Path,
    replicas: usize,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    if replicas < 2 {
        return Err(CliError::Validation(format!(
            "need >= 2 replicas, got {replicas}"
        )));
    }
    let frames = Arc::new(read_container(container)?);
    let ds = pipeline::build_dataset(Arc::clone(&frames), cfg)?;
    let mut runs = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let outcome = pipeline::run_training(&ds, &frames, cfg, cfg.seed + r as u64)?;
        runs.push(
            outcome
                .history
                .iter()
                .map(|rec| vec![rec.train_loss, rec.test_loss, rec.test_metric])
                .collect::<Vec<_>>(),
        );
    }
    let stats = eval::ensemble_stats(&runs).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = out_dir.join("ensemble.csv");
    let mut text = String::from(
        "epoch,train_loss_mean,train_loss_std,test_loss_mean,test_loss_std,metric_mean,metric_std\n",
    );
    for (epoch, (mean, std)) in stats.mean.iter().zip(&stats.std).enumerate() {
        text.push_str(&format!(
            "{epoch},{},{},{},{},{},{}\n",
            mean[0], std[0], mean[1], std[1], mean[2], std[2]
        ));
    }
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut m = Manifest::new("ensemble", cfg.seed);
    m.push("config_hash", config_hash);
    m.push_file("input_container", container)?;
    m.push("replicas", replicas);
    m.push_file("ensemble", &path)?;
    m.write(out_dir, "ensemble")?;
    println!("ensemble: {replicas} replicas aggregated");
    Ok(())
}

fn cmd_wind_ingest(
    cfg: &RunConfig,
    container: &Path,
    meta_path: &Path,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    let meta =
        wind::read_geo_meta(meta_path).map_err(|e| CliError::Validation(e.to_string()))?;
    let frames = wind::ingest_wind(container, &meta)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let out_container = out_dir.join("wind.xevd");
    store::write_frames(&frames, &out_container)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    wind::write_geo_meta(&meta, &out_dir.join("wind-meta.txt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut m = Manifest::new("wind-ingest", cfg.seed);
    m.push("config_hash", config_hash);
    m.push_file("input_container", container)?;
    m.push("frames", frames.frames.len());
    m.push("cadence_hours", meta.cadence_hours());
    for d in 1..=3 {
        m.push(&format!("dls_{d}day_steps"), meta.dls_steps(d));
    }
    m.push_file("container", &out_container)?;
    m.write(out_dir, "wind-ingest")?;
    println!(
        "wind-ingest: {} frames at {} h cadence ({} .. {})",
        frames.frames.len(),
        meta.cadence_hours(),
        meta.start_date,
        meta.end_date
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth_storms(
    cfg: &RunConfig,
    n_frames: usize,
    rate: f64,
    bias: f64,
    shape: (usize, usize),
    steps_per_day: usize,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    if steps_per_day == 0 || n_frames == 0 {
        return Err(CliError::Validation(
            "frames and steps_per_day must be >= 1".to_string(),
        ));
    }
    let days = n_frames.div_ceil(steps_per_day);
    let start = chrono::NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let meta = wind::GeoMeta {
        steps_per_day,
        start_date: start,
        end_date: start + chrono::Days::new(days as u64 - 1),
        ..wind::GeoMeta::north_atlantic(steps_per_day)
    };
    let frames = wind::synth_storms(&meta, shape, n_frames, rate, bias, cfg.seed)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let container = out_dir.join("storms.xevd");
    store::write_frames(&frames, &container).map_err(|e| CliError::Runtime(e.to_string()))?;
    wind::write_geo_meta(&meta, &out_dir.join("storms-meta.txt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut m = Manifest::new("synth-storms", cfg.seed);
    m.push("config_hash", config_hash);
    m.push("frames", n_frames);
    m.push("event_rate", rate);
    m.push("bias", bias);
    m.push_file("container", &container)?;
    m.write(out_dir, "synth-storms")?;
    println!("synth-storms: {n_frames} frames written");
    Ok(())
}

fn cmd_diagnostics(
    cfg: &RunConfig,
    mode: &str,
    n_renorms: usize,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    let params = cfg.sim.to_params(cfg.seed);
    let mut m = Manifest::new("diagnostics", cfg.seed);
    m.push("config_hash", config_hash);
    m.push("mode", mode);
    match mode {
        "correlation" => {
            let (frames, fields) =
                sim::integrate_and_sample_with_fields(&params, cfg.sim.duration, usize::MAX)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            let max_lag = (fields.len() / 4).clamp(2, 400);
            let fit = sim::temporal_correlation(&fields, max_lag)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = out_dir.join("correlation.csv");
            let mut text = String::from("lag_steps,c_st\n");
            for (lag, v) in fit.lags.iter().zip(&fit.values) {
                text.push_str(&format!("{lag},{v}\n"));
            }
            std::fs::write(&path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
            m.push("frames", frames.frames.len());
            m.push("tau_c_steps", fit.tau_c);
            m.push("r_squared", fit.r_squared);
            m.push_file("correlation", &path)?;
            println!(
                "diagnostics: tau_c {:.3} steps (R^2 {:.4})",
                fit.tau_c, fit.r_squared
            );
        }
        "periods" => {
            let (frames, fields) =
                sim::integrate_and_sample_with_fields(&params, cfg.sim.duration, usize::MAX)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            let (mean_omega, mean_k) = sim::mean_periods(&frames, &fields, params.side_length);
            m.push("mean_abs_omega", mean_omega);
            m.push("mean_abs_k", mean_k);
            println!("diagnostics: mean |omega| {mean_omega:.4}, mean |k| {mean_k:.4}");
        }
        "lyapunov" => {
            // ~0.05 time units between renormalizations
            let interval = ((0.05 / params.dt).round() as usize).max(1);
            let lambda = sim::lyapunov_max(&params, interval, n_renorms)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            m.push("renorm_interval_steps", interval);
            m.push("n_renorms", n_renorms);
            m.push("lambda_max", lambda);
            println!("diagnostics: lambda_max {lambda:.4}");
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown diagnostics mode '{other}' (correlation/periods/lyapunov)"
            )));
        }
    }
    m.write(out_dir, "diagnostics")?;
    Ok(())
}
