//! Command-line pipeline around `loggraph-core`: configuration and stages.

pub mod config;
pub mod pipeline;
