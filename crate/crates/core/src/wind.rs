//! Gridded wind-speed ingestion plus a synthetic storm generator.
//!
//! Real data arrives as FrameContainer files produced by an external
//! conversion (10-m wind speed magnitude on a fixed lat/lon box); this
//! module validates them against calendar metadata. The storm generator
//! stands in for the gated archive: smooth low-pass background plus drifting
//! Gaussian bumps whose peaks ramp over the gale thresholds.

use crate::sim::FrameSet;
use crate::store::{self, StoreError};
use chrono::NaiveDate;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WindError {
    #[error("format error: {0}")]
    Format(String),
    #[error("metadata mismatch: {0}")]
    MetaMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown threshold preset '{0}'")]
    UnknownPreset(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Geographic and calendar metadata for a wind-frame container.
/// Latitudes in degrees N, longitudes in degrees W; the date range is
/// inclusive on both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMeta {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub steps_per_day: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

impl GeoMeta {
    /// The reference North Atlantic box over 1979-2018.
    pub fn north_atlantic(steps_per_day: usize) -> Self {
        Self {
            lat_min: 0.0,
            lat_max: 70.0,
            lon_min: 20.0,
            lon_max: 90.0,
            steps_per_day,
            start_date: NaiveDate::from_ymd_opt(1979, 1, 1).expect("valid date"),
            end_date: NaiveDate::from_ymd_opt(2018, 12, 31).expect("valid date"),
        }
    }

    pub fn validate(&self) -> Result<(), WindError> {
        if self.lat_min >= self.lat_max {
            return Err(WindError::InvalidParams(format!(
                "lat_min {} >= lat_max {}",
                self.lat_min, self.lat_max
            )));
        }
        if self.lon_min >= self.lon_max {
            return Err(WindError::InvalidParams(format!(
                "lon_min {} >= lon_max {}",
                self.lon_min, self.lon_max
            )));
        }
        if self.steps_per_day == 0 {
            return Err(WindError::InvalidParams(
                "steps_per_day must be >= 1".to_string(),
            ));
        }
        if self.start_date > self.end_date {
            return Err(WindError::InvalidParams(format!(
                "start {} after end {}",
                self.start_date, self.end_date
            )));
        }
        Ok(())
    }

    /// Calendar days covered, leap days included.
    pub fn n_days(&self) -> usize {
        (self.end_date - self.start_date).num_days() as usize + 1
    }

    pub fn expected_frames(&self) -> usize {
        self.n_days() * self.steps_per_day
    }

    /// Frame cadence in hours.
    pub fn cadence_hours(&self) -> f64 {
        24.0 / self.steps_per_day as f64
    }

    /// d-day-look-ahead-scheme horizon in frames.
    pub fn dls_steps(&self, days: usize) -> usize {
        days * self.steps_per_day
    }
}

/// Named gale thresholds, or a literal speed in m/s.
pub fn wind_threshold(spec: &str) -> Result<f64, WindError> {
    match spec {
        // Beaufort force 10 / 11 lower bounds as used for the storm labels.
        "beaufort10" => Ok(26.0),
        "beaufort11" => Ok(30.0),
        other => match other.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
            _ => Err(WindError::UnknownPreset(other.to_string())),
        },
    }
}

/// Reads a wind FrameContainer and validates it against `meta`: values must
/// be non-negative (land-mask cells are exactly 0 and pass through) and the
/// frame count must equal calendar days x steps_per_day.
pub fn ingest_wind(path: &Path, meta: &GeoMeta) -> Result<FrameSet, WindError> {
    meta.validate()?;
    let mut frames = store::read_frames(path)?;
    for (i, frame) in frames.frames.iter().enumerate() {
        if let Some(v) = frame.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(WindError::Format(format!(
                "frame {i} holds invalid wind speed {v}"
            )));
        }
    }
    if frames.frames.len() != meta.expected_frames() {
        return Err(WindError::MetaMismatch(format!(
            "{} frames in container, but {} to {} at {} steps/day needs {}",
            frames.frames.len(),
            meta.start_date,
            meta.end_date,
            meta.steps_per_day,
            meta.expected_frames()
        )));
    }
    // cadence is authoritative from the calendar metadata, in days
    frames.sample_dt = 1.0 / meta.steps_per_day as f64;
    frames.t0 = 0.0;
    Ok(frames)
}

pub fn write_geo_meta(meta: &GeoMeta, path: &Path) -> Result<(), WindError> {
    let text = format!(
        "lat_min={}\nlat_max={}\nlon_min={}\nlon_max={}\nsteps_per_day={}\nstart_date={}\nend_date={}\n",
        meta.lat_min,
        meta.lat_max,
        meta.lon_min,
        meta.lon_max,
        meta.steps_per_day,
        meta.start_date,
        meta.end_date
    );
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_geo_meta(path: &Path) -> Result<GeoMeta, WindError> {
    let text = std::fs::read_to_string(path)?;
    let get = |key: &str| -> Result<String, WindError> {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .map(str::to_string)
            .ok_or_else(|| WindError::Format(format!("missing key '{key}' in geo sidecar")))
    };
    let float = |s: String| {
        s.parse::<f64>()
            .map_err(|_| WindError::Format(format!("bad float '{s}' in geo sidecar")))
    };
    let date = |s: String| {
        NaiveDate::parse_from_str(&s, "%Y-%m-%d")
            .map_err(|_| WindError::Format(format!("bad date '{s}' in geo sidecar")))
    };
    let meta = GeoMeta {
        lat_min: float(get("lat_min")?)?,
        lat_max: float(get("lat_max")?)?,
        lon_min: float(get("lon_min")?)?,
        lon_max: float(get("lon_max")?)?,
        steps_per_day: get("steps_per_day")?
            .parse()
            .map_err(|_| WindError::Format("bad steps_per_day in geo sidecar".to_string()))?,
        start_date: date(get("start_date")?)?,
        end_date: date(get("end_date")?)?,
    };
    meta.validate()?;
    Ok(meta)
}

/// Storm schedule internals: candidate start slots every `SLOT` frames; an
/// active slot hosts one storm whose peak profile keeps exactly
/// `FRAMES_OVER_26` frames above 26 m/s and `FRAMES_OVER_30` above 30 m/s.
const SLOT: usize = 20;
const PROFILE: [f64; 6] = [0.45, 0.9, 1.0, 1.0, 0.9, 0.45];
pub const FRAMES_OVER_26: usize = 4;
pub const FRAMES_OVER_30: usize = 2;

/// Expected fraction of frames above 26 m/s equals `event_rate`; the
/// per-slot activation probability follows from the profile.
fn slot_probability(event_rate: f64) -> f64 {
    event_rate * SLOT as f64 / FRAMES_OVER_26 as f64
}

/// Synthetic storm frames: low-wavenumber background in [0, 15] m/s with
/// drifting Gaussian storms superimposed (by max, so the calibrated peak
/// values survive). `bias` in [0, 1] is the probability that a storm centre
/// is confined to the south-west quadrant, mimicking spatially inhomogeneous
/// event occurrence; 0 means uniform.
pub fn synth_storms(
    meta: &GeoMeta,
    shape: (usize, usize),
    n_frames: usize,
    event_rate: f64,
    bias: f64,
    seed: u64,
) -> Result<FrameSet, WindError> {
    meta.validate()?;
    let (ny, nx) = shape;
    if ny < 16 || nx < 16 {
        return Err(WindError::InvalidParams(format!(
            "grid {ny}x{nx} too small for storm bumps (min 16x16)"
        )));
    }
    if !(0.0..0.2).contains(&event_rate) {
        return Err(WindError::InvalidParams(format!(
            "event_rate {event_rate} outside [0, 0.2)"
        )));
    }
    if !(0.0..=1.0).contains(&bias) {
        return Err(WindError::InvalidParams(format!(
            "bias {bias} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Background: a fixed set of low-wavenumber travelling modes.
    const N_MODES: usize = 8;
    let modes: Vec<(f64, f64, f64, f64, f64)> = (0..N_MODES)
        .map(|_| {
            let kx = rng.random_range(1..=3) as f64 * std::f64::consts::TAU / nx as f64;
            let ky = rng.random_range(1..=3) as f64 * std::f64::consts::TAU / ny as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let omega = rng.random_range(-0.05..0.05);
            let amp = rng.random_range(0.3..0.9);
            (kx, ky, phase, omega, amp)
        })
        .collect();
    let amp_total: f64 = modes.iter().map(|m| m.4).sum();
    // centre 7.5 m/s, modes rescaled so the range stays within [0, 15]
    let mode_scale = 7.0 / amp_total;

    struct Storm {
        start: usize,
        cy: f64,
        cx: f64,
        vy: f64,
        vx: f64,
        peak: f64,
        sigma: f64,
    }
    let p_slot = slot_probability(event_rate);
    let mut storms = Vec::new();
    let n_slots = n_frames / SLOT;
    for slot in 0..n_slots {
        if rng.random_range(0.0..1.0) >= p_slot {
            continue;
        }
        // storm occupies offsets 4..10 of its slot; centre stays interior
        let (lo_y, hi_y, lo_x, hi_x) = if rng.random_range(0.0..1.0) < bias {
            (0.55, 0.8, 0.2, 0.45)
        } else {
            (0.2, 0.8, 0.2, 0.8)
        };
        storms.push(Storm {
            start: slot * SLOT + 4,
            cy: rng.random_range(lo_y..hi_y) * ny as f64,
            cx: rng.random_range(lo_x..hi_x) * nx as f64,
            vy: rng.random_range(-0.4..0.4),
            vx: rng.random_range(-0.4..0.4),
            // keep 0.9*peak below 30 so the over-30 run stays exactly
            // FRAMES_OVER_30 frames long
            peak: rng.random_range(31.5..33.0),
            sigma: rng.random_range(3.0..5.0),
        });
    }

    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let mut frame = Array2::from_shape_fn((ny, nx), |(y, x)| {
            let mut v = 7.5;
            for &(kx, ky, phase, omega, amp) in &modes {
                v += amp * mode_scale * (kx * x as f64 + ky * y as f64 + phase + omega * t as f64).sin();
            }
            v.clamp(0.0, 15.0) as f32
        });
        for storm in &storms {
            if t < storm.start || t >= storm.start + PROFILE.len() {
                continue;
            }
            let step = t - storm.start;
            let amp = storm.peak * PROFILE[step];
            let cy = storm.cy + storm.vy * step as f64;
            let cx = storm.cx + storm.vx * step as f64;
            let inv_two_sigma2 = 1.0 / (2.0 * storm.sigma * storm.sigma);
            // snap the centre to the nearest grid point so the sampled peak
            // hits the calibrated amplitude exactly
            let (gy, gx) = (cy.round(), cx.round());
            for ((y, x), v) in frame.indexed_iter_mut() {
                let d2 = (y as f64 - gy).powi(2) + (x as f64 - gx).powi(2);
                let bump = (amp * (-d2 * inv_two_sigma2).exp()) as f32;
                if bump > *v {
                    *v = bump;
                }
            }
        }
        frames.push(frame);
    }
    Ok(FrameSet {
        frames,
        sample_dt: 1.0 / meta.steps_per_day as f64,
        t0: 0.0,
        source_tag: format!("synthstorm seed={seed} rate={event_rate} bias={bias}"),
    })
}
