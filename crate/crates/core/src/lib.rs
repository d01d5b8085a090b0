//! Layer-fusion planner and depth-first tiled inference engine for
//! sequential networks.
//!
//! The pipeline: parse a network description ([`graph`]), detect runs of
//! element-wise and pooling layers and collapse them into cache-sized
//! execution plans ([`planner`]), then execute either breadth-first or
//! depth-first with identical results and counted main-memory traffic
//! ([`executor`]).

// Index loops mirror the fixed accumulation orders the kernels promise.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod executor;
pub mod graph;
pub mod layers;
pub mod planner;
pub mod tensor;

pub use error::{Error, Result};
