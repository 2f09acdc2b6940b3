//! Command-line companion to `aam-core`: file formats (corpus, checkpoint,
//! metrics, manifests), flat key=value configuration, and the `aam`
//! subcommands wiring the pipeline together.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod manifest;
pub mod metrics;
