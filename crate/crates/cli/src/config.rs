//! Run configuration: one TOML file with sections mirroring the pipeline
//! stages. Every field has a default so a minimal config stays minimal;
//! command-line flags override file values.

use serde::{Deserialize, Serialize};
use xev_core::net::OptimConfig;
use xev_core::sim::SimParams;

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub sim: SimSection,
    pub label: LabelSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".to_string(),
            sim: SimSection::default(),
            label: LabelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub eps: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub beta: f64,
    pub sign_nl: f64,
    pub sign_lap: f64,
    pub side_length: f64,
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub sample_dt: f64,
    pub warmup_time: f64,
    /// Total integration time including warmup.
    pub duration: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let p = SimParams::default();
        Self {
            eps: p.eps,
            gamma: p.gamma,
            alpha: p.alpha,
            mu: p.mu,
            beta: p.beta,
            sign_nl: p.sign_nl,
            sign_lap: p.sign_lap,
            side_length: p.side_length,
            nx: p.nx,
            ny: p.ny,
            dt: p.dt,
            sample_dt: p.sample_dt,
            warmup_time: p.warmup_time,
            duration: p.warmup_time + 20.0,
        }
    }
}

impl SimSection {
    pub fn to_params(&self, seed: u64) -> SimParams {
        SimParams {
            eps: self.eps,
            gamma: self.gamma,
            alpha: self.alpha,
            mu: self.mu,
            beta: self.beta,
            sign_nl: self.sign_nl,
            sign_lap: self.sign_lap,
            side_length: self.side_length,
            nx: self.nx,
            ny: self.ny,
            dt: self.dt,
            sample_dt: self.sample_dt,
            warmup_time: self.warmup_time,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    /// "when", "where", or "dls".
    pub mode: String,
    /// Numeric threshold or a named preset ("beaufort10"/"beaufort11").
    pub threshold: String,
    /// Horizon in sampling steps ("when"/"where" modes).
    pub p: usize,
    /// Grid coarsening for the "where" task (g x g classes).
    pub g: usize,
    /// DLS horizon in days ("dls" mode).
    pub days: usize,
    /// Frames per day ("dls" mode).
    pub steps_per_day: usize,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            mode: "when".to_string(),
            threshold: "5.0".to_string(),
            p: 10,
            g: 2,
            days: 1,
            steps_per_day: 4,
        }
    }
}

impl LabelSection {
    pub fn threshold_value(&self) -> Result<f64, CliError> {
        xev_core::wind::wind_threshold(&self.threshold)
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Effective horizon in frames for the configured mode.
    pub fn horizon(&self) -> Result<usize, CliError> {
        match self.mode.as_str() {
            "when" | "where" => Ok(self.p),
            "dls" => Ok(self.days * self.steps_per_day),
            other => Err(CliError::Validation(format!(
                "unknown label mode '{other}' (expected when/where/dls)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Chronological train fraction; the remainder is held out.
    pub split_fraction: f64,
    /// Downsample the training side to class balance before shuffling.
    pub balance: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            l2: o.l2,
            batch_size: o.batch_size,
            epochs: o.epochs,
            split_fraction: 0.75,
            balance: true,
        }
    }
}

impl TrainSection {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            l2: self.l2,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config parse error: {e}")))
    }

    /// Fail fast on anything a long-running command would only trip over
    /// later.
    pub fn validate(&self) -> Result<(), CliError> {
        self.sim
            .to_params(self.seed)
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if self.sim.duration <= self.sim.warmup_time {
            return Err(CliError::Validation(format!(
                "duration {} must exceed warmup_time {}",
                self.sim.duration, self.sim.warmup_time
            )));
        }
        self.label.threshold_value()?;
        let horizon = self.label.horizon()?;
        if horizon == 0 {
            return Err(CliError::Validation("label horizon must be >= 1".to_string()));
        }
        if self.label.mode == "where" && self.label.g < 1 {
            return Err(CliError::Validation("grid coarsening g must be >= 1".to_string()));
        }
        self.train
            .optim()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if !(0.0..1.0).contains(&self.train.split_fraction) || self.train.split_fraction == 0.0 {
            return Err(CliError::Validation(format!(
                "split_fraction {} outside (0, 1)",
                self.train.split_fraction
            )));
        }
        Ok(())
    }

    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
