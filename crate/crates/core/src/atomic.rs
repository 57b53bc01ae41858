//! Temp-file-and-rename writes. A failed writer never leaves a partial file
//! at the destination path.

use std::io::{BufWriter, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Runs `fill` against a temporary file next to `path` and renames it into
/// place only if `fill` succeeds. Returns the number of bytes written.
pub fn write_with<F>(path: &Path, fill: F) -> Result<u64>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(tmp);
    // On error the temp file is dropped, which deletes it.
    fill(&mut w).map_err(|e| Error::io(path, e))?;
    let tmp = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    let file = tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    Ok(len)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<u64> {
    write_with(path, |w| w.write_all(bytes))
}
