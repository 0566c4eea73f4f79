//! Benchmark protocol for `kbq-core`: synthetic KBs, splits, templated query
//! generation, rank metrics, sketch statistics and the `kbq` command line.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod sketchbench;
pub mod synth;
