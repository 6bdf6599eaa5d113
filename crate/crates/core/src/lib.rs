//! Semi-supervised nuclei instance segmentation with instance-aware
//! consistency regularization: a Mean-Teacher loop whose consistency terms
//! are restricted to matched teacher/student instances and weighted by a
//! morphological prior.

pub mod cli;
pub mod consistency;
pub mod data;
pub mod error;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod priors;
pub mod raster;
pub mod trainer;
pub mod wbis;

pub use error::{Error, Result};
