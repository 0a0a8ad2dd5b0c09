//! Standard-library companion to `lfads-core`: dataset and checkpoint file
//! formats, the multi-threaded training loop, evaluation reports and the
//! `lfads-forge` command line.

pub mod analysis;
pub mod checkpoint;
pub mod dataset_io;
pub mod error;
pub mod experiment;
pub mod report;
pub mod trainer;

pub use error::{ForgeError, Result};
