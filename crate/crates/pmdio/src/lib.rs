//! Parallel particle-mesh I/O engine.
//!
//! A series of simulation iterations is written through an openPMD-style
//! data model (series, iterations, mesh and particle records, chunked
//! components) onto a log-structured, aggregator-subfiled on-disk layout
//! with per-step commit records, optional compression, built-in I/O cost
//! accounting, and a stripe placement planner. A miniature particle-in-cell
//! workload and an I/O benchmark drive the whole stack end to end.

pub mod bench;
pub mod codecs;
pub mod comm;
pub mod config;
pub mod engine;
pub mod error;
pub mod model;
pub mod monitor;
pub mod striping;
pub mod workload;

pub use config::EngineConfig;
pub use error::{Error, Result};
pub use model::{Access, Element, Series};
