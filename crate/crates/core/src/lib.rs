//! Power side-channel simulation of a weight-stationary systolic array.

pub mod cpa;
pub mod device;
pub mod error;
pub mod experiment;
pub mod noise;
pub mod power;
pub mod seed;
pub mod stats;
pub mod systolic;
pub mod template;
pub mod trace;
pub mod trace_io;

pub use error::{Error, Result};
pub use systolic::{InputSample, Pe, WeightMatrix};
pub use trace::{PowerTrace, SetPurpose, TraceSet};
