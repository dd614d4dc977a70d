//! Dataset, checkpoint and table files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use eigensde_core::nets::{CheckpointRecord, HyperModel};
use eigensde_core::synth::{Dataset, DatasetHeader, DATASET_VERSION};
use eigensde_core::train::Trajectory;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// `dir/name.ext` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CliError::io(path, e))
}

/// Header line followed by one trajectory per line.
pub fn write_dataset(path: &Path, ds: &Dataset) -> CliResult<()> {
    let mut w = create(path)?;
    let err = |e: &dyn std::fmt::Display| CliError::io(path, e);
    serde_json::to_writer(&mut w, &ds.header).map_err(|e| err(&e))?;
    w.write_all(b"\n").map_err(|e| err(&e))?;
    for t in &ds.trajectories {
        serde_json::to_writer(&mut w, t).map_err(|e| err(&e))?;
        w.write_all(b"\n").map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

/// Trajectories of a dataset file, with its header if the first line is one.
/// Files without a header are plain trajectory lines.
pub fn read_trajectories(path: &Path) -> CliResult<(Option<DatasetHeader>, Vec<Trajectory>)> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut header = None;
    let mut trajs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{} line 1: {e}", path.display())))?;
            if v.get("format_version").is_some() {
                let h: DatasetHeader = serde_json::from_value(v).map_err(|e| CliError::Data(format!("{} header: {e}", path.display())))?;
                if h.format_version != DATASET_VERSION {
                    return Err(CliError::Data(format!("{}: unsupported dataset version {}", path.display(), h.format_version)));
                }
                header = Some(h);
                continue;
            }
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        t.validate().map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        trajs.push(t);
    }
    if trajs.is_empty() {
        return Err(CliError::Data(format!("{}: no trajectories", path.display())));
    }
    Ok((header, trajs))
}

pub fn write_checkpoint(path: &Path, model: &HyperModel) -> CliResult<()> {
    write_json(path, &CheckpointRecord::from(model))
}

pub fn read_checkpoint(path: &Path) -> CliResult<HyperModel> {
    let rec: CheckpointRecord = read_json(path)?;
    HyperModel::try_from(rec).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let w = create(path)?;
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}

/// CSV with an explicit header, for tables whose width depends on the data.
pub fn write_csv_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let w = create(path)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        out.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}
