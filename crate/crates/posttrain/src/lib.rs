//! Std companion to `posttrain-core`: checkpoint and dataset files, run
//! configuration and manifests, training logs, the contamination and
//! language audit, the learning-rate/batch-size sweep runner, and the
//! `posttrain` command-line interface.

pub mod audit;
pub mod cli;
pub mod config;
pub mod io;
pub mod loaders;
pub mod manifest;
pub mod sweep;
pub mod trainlog;
