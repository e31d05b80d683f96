//! Quality control for ensemble-generated synthetic CT.
//!
//! Several generators each turn one MR volume into a synthetic CT (sCT). This
//! crate fuses their outputs by voxel-wise median and measures disagreement as
//! the per-voxel range. The disagreement is averaged inside an automatically
//! extracted body contour, giving one number per case. That number is used to
//! flag out-of-distribution inputs and, where a reference CT exists, to track
//! sCT error.
//!
//! A phantom simulator stands in for clinical data and trained generators.
//! See the runnable programs under `examples/`.

pub mod cli;
pub mod contour;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod sim;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
