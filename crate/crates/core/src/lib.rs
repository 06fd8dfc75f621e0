//! Spatiotemporal extreme-event toolkit.
//!
//! Generates chaotic field data from the 2D complex Ginzburg-Landau equation,
//! detects and labels extreme events for "when" (binary, horizon `p`) and
//! "where" (grid-cell multiclass) prediction tasks, trains a compact
//! convolutional classifier from scratch, and evaluates predictions with
//! ROC/AUC, confusion matrices, top-k accuracy, and horizon profiles.
//! Empirical gridded wind-speed frames flow through the same pipeline.

pub mod eval;
pub mod labeling;
pub mod net;
pub mod sim;
pub mod store;
pub mod wind;

pub use sim::{Field2D, FrameSet, SimParams};
