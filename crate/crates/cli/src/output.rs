//! Atomic file output: each artifact is written to a temporary file in the
//! destination directory and renamed into place.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::exit::{CliError, Code};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(Code::Io, format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Runs `fill` against a buffered temp file, then renames it to `path`.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Writes a header and rows of already-formatted cells as CSV.
pub fn write_csv_file(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    write_atomic(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(header).map_err(|e| io_err(path, e))?;
        for r in rows {
            c.write_record(r).map_err(|e| io_err(path, e))?;
        }
        c.flush().map_err(|e| io_err(path, e))
    })
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}
