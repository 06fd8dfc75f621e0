//! Shared dataset assembly and training drivers used by the train,
//! evaluate, and ensemble subcommands.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use xev_core::labeling::{
    detect_events, dls_labels, label_when, label_where, EventRecord, GridSpec,
};
use xev_core::net::{self, HeadKind, Model, Tensor4, TrainOutcome};
use xev_core::sim::FrameSet;
use xev_core::store::{balance_downsample, chronological_split, seeded_shuffle, LabeledDataset};

use crate::config::RunConfig;
use crate::CliError;

pub struct BuiltDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub events: Vec<EventRecord>,
    pub threshold: f64,
    pub horizon: usize,
    pub n_classes: usize,
}

pub fn build_dataset(frames: Arc<FrameSet>, cfg: &RunConfig) -> Result<BuiltDataset, CliError> {
    let label = &cfg.label;
    let threshold = label.threshold_value()?;
    let horizon = label.horizon()?;
    let n_frames = frames.frames.len();
    let events =
        detect_events(&frames, threshold).map_err(|e| CliError::Runtime(e.to_string()))?;
    let runtime = |e: &dyn std::fmt::Display| CliError::Runtime(e.to_string());
    let (full, n_classes) = match label.mode.as_str() {
        "when" => {
            let labels = label_when(n_frames, &events, horizon).map_err(|e| runtime(&e))?;
            (
                LabeledDataset::from_when(Arc::clone(&frames), &labels)
                    .map_err(|e| runtime(&e))?,
                2,
            )
        }
        "dls" => {
            let labels = dls_labels(n_frames, &events, label.days, label.steps_per_day)
                .map_err(|e| runtime(&e))?;
            (
                LabeledDataset::from_when(Arc::clone(&frames), &labels)
                    .map_err(|e| runtime(&e))?,
                2,
            )
        }
        "where" => {
            let (ny, nx) = frames.frame_shape();
            let grid = GridSpec::new(label.g, nx, ny).map_err(|e| runtime(&e))?;
            let labels = label_where(&events, horizon, &grid).map_err(|e| runtime(&e))?;
            (
                LabeledDataset::from_where(Arc::clone(&frames), &labels)
                    .map_err(|e| runtime(&e))?,
                grid.n_classes(),
            )
        }
        other => {
            return Err(CliError::Validation(format!("unknown label mode '{other}'")));
        }
    };
    let (mut train, test) = chronological_split(&full, cfg.train.split_fraction)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    if cfg.train.balance {
        train = balance_downsample(&train, cfg.seed)
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    train = seeded_shuffle(&train, cfg.seed);
    Ok(BuiltDataset {
        train,
        test,
        events,
        threshold,
        horizon,
        n_classes,
    })
}

impl BuiltDataset {
    pub fn head(&self) -> HeadKind {
        if self.n_classes == 2 {
            HeadKind::Sigmoid
        } else {
            HeadKind::Softmax(self.n_classes)
        }
    }

    /// Train/test tensors normalized by the event threshold.
    pub fn tensors(&self) -> (Tensor4<f32>, Vec<usize>, Tensor4<f32>, Vec<usize>) {
        let scale = self.threshold as f32;
        let (xtr, ytr) = self.train.to_tensor(scale);
        let (xte, yte) = self.test.to_tensor(scale);
        (xtr, ytr, xte, yte)
    }
}

pub fn build_model(ds: &BuiltDataset, frames: &FrameSet, seed: u64) -> Result<Model<f32>, CliError> {
    let (ny, nx) = frames.frame_shape();
    let specs = net::lenet_small((1, ny, nx), ds.head());
    Model::new(specs, (1, ny, nx), seed).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn run_training(
    ds: &BuiltDataset,
    frames: &FrameSet,
    cfg: &RunConfig,
    seed: u64,
) -> Result<TrainOutcome, CliError> {
    let mut model = build_model(ds, frames, seed)?;
    let (xtr, ytr, xte, yte) = ds.tensors();
    net::train(&mut model, &xtr, &ytr, &xte, &yte, &cfg.train.optim())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn write_history_csv(outcome: &TrainOutcome, path: &Path) -> Result<(), CliError> {
    let mut text = String::from("epoch,train_loss,test_loss,test_metric\n");
    for r in &outcome.history {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.test_loss, r.test_metric
        ));
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

/// Per-sample probabilities over the test split, evaluated in chunks.
pub fn predict(model: &Model<f32>, x: &Tensor4<f32>) -> Result<Array2<f32>, CliError> {
    let n = x.batch();
    let width = match model.head_kind() {
        HeadKind::Sigmoid => 1,
        HeadKind::Softmax(c) => c,
    };
    let mut probs = Array2::zeros((n, width));
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let chunk = Tensor4 {
            data: x
                .data
                .slice_axis(Axis(0), ndarray::Slice::from(start..end))
                .to_owned(),
        };
        let p = model
            .forward(&chunk)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        probs
            .slice_axis_mut(Axis(0), ndarray::Slice::from(start..end))
            .assign(&p);
        start = end;
    }
    Ok(probs)
}
