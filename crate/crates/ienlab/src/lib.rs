//! File formats, configuration, parallel drivers and the `ienlab` command
//! line on top of [`ienlab_core`].

pub mod cli;
pub mod config;
pub mod export;
pub mod io;
pub mod parallel;

pub use ienlab_core as core;
