//! File loading and atomic output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use c3_core::calibrate::{load_measurements, Measurement};
use c3_core::interference::load_slowdown_tables;
use c3_core::sim::zero_interference;
use c3_core::{
    bundled_dataset, load_dataset, C3Scenario, MachineDescriptor, ModelParams, SlowdownTables,
};

use crate::{Failure, Inputs};

/// Everything a command needs from disk, defaults filled in.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub machine: MachineDescriptor,
    pub dataset: Vec<C3Scenario>,
    pub tables: SlowdownTables,
    pub params: ModelParams,
}

pub fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::io(anyhow::anyhow!("cannot read {}: {e}", path.display())))
}

fn with_path(path: &Path) -> impl FnOnce(c3_core::Error) -> Failure + '_ {
    move |e| Failure::from(e).context(format!("in {}", path.display()))
}

pub fn load(inputs: &Inputs) -> Result<Loaded, Failure> {
    let machine = match &inputs.machine {
        Some(p) => MachineDescriptor::from_json(&read(p)?).map_err(with_path(p))?,
        None => MachineDescriptor::mi300x(),
    };
    let dataset = match &inputs.dataset {
        Some(p) => load_dataset(&read(p)?).map_err(with_path(p))?,
        None => bundled_dataset(),
    };
    let tables = match &inputs.tables {
        Some(p) => load_slowdown_tables(&read(p)?).map_err(with_path(p))?,
        None => SlowdownTables::mi300x(),
    };
    tables.validate(&machine).map_err(|e| {
        let hint = if inputs.tables.is_none() {
            "bundled slowdown tables do not fit this machine; pass --tables"
        } else {
            "slowdown tables do not fit the machine"
        };
        Failure::from(e).context(hint)
    })?;
    let params = match &inputs.params {
        Some(p) => ModelParams::from_json(&read(p)?).map_err(with_path(p))?,
        None => ModelParams::bundled(),
    };
    let loaded = Loaded {
        machine,
        dataset,
        tables,
        params,
    };
    Ok(if inputs.zero_interference {
        let (machine, tables, params) = zero_interference(&loaded.machine, &loaded.params);
        Loaded {
            machine,
            tables,
            params,
            ..loaded
        }
    } else {
        loaded
    })
}

pub fn load_measured(path: &Path) -> Result<Vec<Measurement>, Failure> {
    load_measurements(&read(path)?).map_err(with_path(path))
}

/// Write via a temp file in the target directory, then rename over it.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| Failure::io(anyhow::anyhow!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents.as_bytes()).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

/// `out/sweep.csv` -> `out/sweep.summary.csv`.
pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "sweep".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.summary.csv"))
}
