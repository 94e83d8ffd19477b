//! Work-zone scene graphs, failure-pattern mining, case retrieval and
//! constraint-based trajectory mitigation.

pub mod casedb;
pub mod clustering;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mining;
pub mod pipeline;
pub mod planner;
pub mod render;
pub mod retrieval;
pub mod scene_graph;
pub mod suite;
pub mod vlm_adapter;

pub use error::{Error, Result};
