//! Toolkit for 4D swallowing CT: volume/label IO, a synthetic phantom with
//! ground truth, the three ground-truth segmentation procedures (region
//! growing, rigid tracking, cage deformation), Dice evaluation with
//! leave-one-out orchestration, and surface extraction for motion display.
//!
//! Orientation convention used throughout: voxel index `(x, y, z)` with x
//! fastest in memory; the phantom places +x toward the patient's right,
//! +y anterior and +z superior.

mod error;

pub mod evalkit;
pub mod meshviz;
pub mod phantom;
pub mod segkit;
pub mod volcore;

pub use error::{Error, Result};

/// Version string embedded in reports.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
