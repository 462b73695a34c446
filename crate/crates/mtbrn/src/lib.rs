//! File formats, configuration, and command implementations for the
//! `mtbrn` binary.

pub mod catalog;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod manifest;
