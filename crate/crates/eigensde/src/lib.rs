//! File formats, experiment runners and the `eigensde` command line on top of
//! [`eigensde_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod run;

pub use error::{CliError, CliResult};
