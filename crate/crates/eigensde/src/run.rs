//! The `run.json` record written by every command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::CliResult;
use crate::io::write_json;

pub const GIT_DESCRIBE: &str = env!("EIGENSDE_GIT_DESCRIBE");

#[derive(Debug, Serialize)]
pub struct RunRecord<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub git_describe: &'a str,
    pub seed: Option<u64>,
    pub config: &'a C,
    pub outputs: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

/// Wall clock of one command.
pub struct RunTimer {
    command: &'static str,
    start: Instant,
}

impl RunTimer {
    pub fn start(command: &'static str) -> Self {
        RunTimer { command, start: Instant::now() }
    }

    /// Write `run.json` into `dir`.
    pub fn finish<C: Serialize>(self, dir: &Path, seed: Option<u64>, config: &C, outputs: Vec<PathBuf>) -> CliResult<PathBuf> {
        let record = RunRecord {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            seed,
            config,
            outputs,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        let path = dir.join("run.json");
        write_json(&path, &record)?;
        Ok(path)
    }
}

/// Directory that receives `run.json`: the explicit one, else the parent of
/// the primary output.
pub fn run_dir(explicit: Option<&Path>, primary: &Path) -> PathBuf {
    match explicit {
        Some(d) => d.to_path_buf(),
        None => primary
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    }
}
