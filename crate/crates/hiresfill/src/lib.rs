//! File formats, training and evaluation drivers, the HTTP service and the
//! command line built on `hiresfill-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
pub use hiresfill_core as core;
