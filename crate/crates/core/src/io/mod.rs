//! File formats: binary embeddings, metric CSVs and the run-config echo.

mod config;
mod csv;
mod embfile;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use config::{RunConfig, SourceSpec};
pub use csv::{format_sig9, write_diagnose_csv, write_step_csv, DiagnoseRow, STEP_CSV_HEADER};
pub use embfile::{read_embeddings, write_embeddings, EmbeddingFile, DTYPE_F32, LABEL_MAGIC, MAGIC, VERSION};

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
