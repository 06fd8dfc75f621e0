//! Extreme-event detection and label construction.
//!
//! An extreme event is a maximal consecutive run of frames whose spatial
//! maximum exceeds a threshold. "When" labels mark every frame within the
//! horizon `p` before (and including) an event frame; "where" labels assign
//! the grid cell of the event peak to those frames, duplicating frames whose
//! windows overlap events in different cells.

use crate::sim::FrameSet;
use ndarray::Array2;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid grid: g = {g} must satisfy 1 <= g <= min(nx, ny) = {limit}")]
    InvalidGrid { g: usize, limit: usize },
    #[error("horizon p must be >= 1")]
    InvalidHorizon,
    #[error("threshold must be > 0, got {0}")]
    InvalidThreshold(f64),
}

/// One detected extreme event: the peak frame of a consecutive
/// super-threshold run.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub frame_index: usize,
    /// (row, col) of the spatial argmax of the peak frame.
    pub peak_location: (usize, usize),
    pub peak_value: f64,
    /// Inclusive bounds of the super-threshold run containing the event.
    pub run_start: usize,
    pub run_end: usize,
}

/// Uniform g x g partition of an (ny, nx) frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub g: usize,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(g: usize, nx: usize, ny: usize) -> Result<Self, LabelError> {
        if g < 1 || g > nx.min(ny) {
            return Err(LabelError::InvalidGrid {
                g,
                limit: nx.min(ny),
            });
        }
        Ok(GridSpec { g, nx, ny })
    }

    /// Row-major cell index of a grid point; cell 0 sits at minimal indices.
    pub fn cell_of(&self, row: usize, col: usize) -> usize {
        (row * self.g / self.ny) * self.g + col * self.g / self.nx
    }

    pub fn n_classes(&self) -> usize {
        self.g * self.g
    }
}

/// Per-frame binary labels for the "when" task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhenLabels {
    pub labels: Vec<u8>,
    pub horizon_p: usize,
}

impl WhenLabels {
    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// One "where" entry; `duplicate` marks frames emitted more than once under
/// the two-events-two-cells rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WhereEntry {
    pub frame_index: usize,
    pub class_label: usize,
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhereLabels {
    /// Sorted by (frame_index, class_label).
    pub entries: Vec<WhereEntry>,
    pub n_classes: usize,
}

impl WhereLabels {
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.n_classes];
        for e in &self.entries {
            hist[e.class_label] += 1;
        }
        hist
    }

    /// Fraction of entries that were emitted as duplicates.
    pub fn duplicate_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let dup = self.entries.iter().filter(|e| e.duplicate).count();
        dup as f64 / self.entries.len() as f64
    }
}

/// Spatial maximum and its earliest row-major location.
fn frame_peak(frame: &Array2<f32>) -> (f64, (usize, usize)) {
    let mut best = f64::NEG_INFINITY;
    let mut loc = (0, 0);
    for ((r, c), &v) in frame.indexed_iter() {
        let v = v as f64;
        if v > best {
            best = v;
            loc = (r, c);
        }
    }
    (best, loc)
}

/// Groups maximal consecutive super-threshold runs into one event each:
/// the event frame is the run's arg-max of the per-frame spatial maximum
/// (ties break to the earliest frame).
pub fn detect_events(frames: &FrameSet, threshold: f64) -> Result<Vec<EventRecord>, LabelError> {
    if !(threshold > 0.0) {
        return Err(LabelError::InvalidThreshold(threshold));
    }
    let peaks: Vec<(f64, (usize, usize))> = frames.frames.iter().map(frame_peak).collect();
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=peaks.len() {
        let over = i < peaks.len() && peaks[i].0 > threshold;
        match (run_start, over) {
            (None, true) => run_start = Some(i),
            (Some(start), false) => {
                let end = i - 1;
                let mut best_frame = start;
                for j in start..=end {
                    if peaks[j].0 > peaks[best_frame].0 {
                        best_frame = j;
                    }
                }
                events.push(EventRecord {
                    frame_index: best_frame,
                    peak_location: peaks[best_frame].1,
                    peak_value: peaks[best_frame].0,
                    run_start: start,
                    run_end: end,
                });
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(events)
}

/// Binary "when" labels: frames in [e - p, e] of any event e are 1 (clipped
/// at frame 0); overlapping windows simply merge.
pub fn label_when(
    n_frames: usize,
    events: &[EventRecord],
    p: usize,
) -> Result<WhenLabels, LabelError> {
    if p < 1 {
        return Err(LabelError::InvalidHorizon);
    }
    let mut labels = vec![0u8; n_frames];
    for e in events {
        let start = e.frame_index.saturating_sub(p);
        let end = e.frame_index.min(n_frames.saturating_sub(1));
        for label in labels.iter_mut().take(end + 1).skip(start) {
            *label = 1;
        }
    }
    Ok(WhenLabels {
        labels,
        horizon_p: p,
    })
}

/// "Where" labels: every frame in an event's horizon window receives the
/// event's cell label. Windows overlapping in the same cell emit the frame
/// once; different cells emit it once per label with `duplicate` set.
pub fn label_where(
    events: &[EventRecord],
    p: usize,
    grid: &GridSpec,
) -> Result<WhereLabels, LabelError> {
    if p < 1 {
        return Err(LabelError::InvalidHorizon);
    }
    // frame -> set of cells claiming it
    let mut claims: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in events {
        let cell = grid.cell_of(e.peak_location.0, e.peak_location.1);
        let start = e.frame_index.saturating_sub(p);
        for frame in start..=e.frame_index {
            let cells = claims.entry(frame).or_default();
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
    }
    let mut entries = Vec::new();
    for (frame, mut cells) in claims {
        cells.sort_unstable();
        let duplicate = cells.len() > 1;
        for cell in cells {
            entries.push(WhereEntry {
                frame_index: frame,
                class_label: cell,
                duplicate,
            });
        }
    }
    Ok(WhereLabels {
        entries,
        n_classes: grid.n_classes(),
    })
}

/// Day-based labeling schemes (1DLS/2DLS/3DLS): a `days`-day horizon at
/// `steps_per_day` frames per day delegates to [`label_when`].
pub fn dls_labels(
    n_frames: usize,
    events: &[EventRecord],
    days: usize,
    steps_per_day: usize,
) -> Result<WhenLabels, LabelError> {
    label_when(n_frames, events, days * steps_per_day)
}
