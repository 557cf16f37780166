//! Multi-task retinal lesion analysis: segmentation of eight lesion types,
//! image-level lesion classification pooled from the same maps, and 5-grade
//! disease grading with lesion-map attention. Includes a synthetic fundus
//! generator so the whole pipeline is exercisable without clinical data.

pub mod error;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
