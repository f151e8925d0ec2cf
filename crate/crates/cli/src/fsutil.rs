use std::fs;
use std::io;
use std::path::Path;

use crate::error::CliResult;

/// Write through a temporary sibling file and rename it into place, so a
/// failed run never leaves a partial file at `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_context(e, &tmp))?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(io_context(e, path));
    }
    Ok(())
}

/// Serialize with `f` into memory, then [`atomic_write`].
pub fn atomic_write_with<F>(path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut Vec<u8>) -> CliResult<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    atomic_write(path, &buf)
}

pub fn io_context(e: io::Error, path: &Path) -> crate::error::CliError {
    crate::error::CliError::from(e).context(path.display())
}

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_context(e, path))
}
