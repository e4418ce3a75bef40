//! Background-modeled losses for incremental and weakly-supervised semantic
//! segmentation, with hand-derived gradients checked against central finite
//! differences.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and threaded execution live in the `mib` companion crate.
//!
//! Layout convention used everywhere: grids are pixel-major, channel-minor,
//! so entry `(row, col, ch)` sits at `(row * width + col) * channels + ch`.
//! The channel order of a logit or probability grid is the ascending order
//! of the [`ClassSet`] that describes it.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod math;

pub mod checkpoint;
pub mod gradcheck;
pub mod labelspace;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use labelspace::{Annotation, ClassId, ClassSet, Label, Mode, StepSchedule};
pub use numerics::{Grid, ProbGrid};
