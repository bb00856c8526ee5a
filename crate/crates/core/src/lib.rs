//! Hierarchical normalizing flows for molecular graphs.

pub mod numerics;
pub mod molgraph;
pub mod flowcore;
pub mod atomflow;
pub mod bondflow;
pub mod error;
pub mod model;
pub mod training;
pub mod generation;
pub mod optimize;
pub mod conformance;

pub use error::{Error, Result};
