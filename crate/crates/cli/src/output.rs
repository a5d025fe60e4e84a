//! Atomic result writing.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::config::Format;
use crate::error::{CliError, CliResult};
use crate::run::RunOutput;

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Temp file next to `path`, filled with `bytes` but not yet in place.
fn staged(path: &Path, bytes: &[u8]) -> CliResult<NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io(path, e))?;
    tmp.write_all(bytes).map_err(|e| io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io(path, e))?;
    Ok(tmp)
}

/// Writes `bytes` to `path` via a temp file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    staged(path, bytes)?
        .persist(path)
        .map_err(|e| io(path, e.error))?;
    Ok(())
}

/// Metadata sidecar of a CSV output: `out.csv` -> `out.csv.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn envelope_json(out: &RunOutput) -> String {
    let mut s = serde_json::to_string_pretty(&out.envelope).expect("envelope serializes");
    s.push('\n');
    s
}

/// Emits a result: CSV plus a JSON sidecar, or the JSON envelope alone.
/// Without a path the primary document goes to stdout.
pub fn emit(out: &RunOutput, path: Option<&Path>, format: Format) -> CliResult<()> {
    let primary = match format {
        Format::Csv => out.csv.clone(),
        Format::Json => envelope_json(out),
    };
    let Some(path) = path else {
        print!("{primary}");
        return Ok(());
    };
    match format {
        Format::Json => write_atomic(path, primary.as_bytes()),
        Format::Csv => {
            // stage both before either appears
            let side = sidecar_path(path);
            let a = staged(path, primary.as_bytes())?;
            let b = staged(&side, envelope_json(out).as_bytes())?;
            b.persist(&side).map_err(|e| io(&side, e.error))?;
            a.persist(path).map_err(|e| io(path, e.error))?;
            Ok(())
        }
    }
}
