//! Detection harness: synthetic scenes, training, scoring, and the `fmcdet`
//! command-line tool on top of the core library.

pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;
