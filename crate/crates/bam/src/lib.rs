//! Files, reports and the command-line harness around [`bam_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod plot;
pub mod report;

pub use bam_core as core;
