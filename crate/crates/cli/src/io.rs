//! Atomic file output: every artifact is written to a temporary file in the
//! destination directory and renamed into place, so a crash or concurrent
//! reader never observes a half-written CSV or checkpoint.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{Context, Result};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` atomically, creating parent directories as
/// needed. The temporary name embeds the process id and a counter so
/// parallel cells never collide.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("invalid output file name {}", path.display()))?;
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes)
        .with_context(|| format!("writing temporary file {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| {
        let _ = std::fs::remove_file(&tmp);
        format!("renaming {} into {}", tmp.display(), path.display())
    })?;
    Ok(())
}

/// Builds the file contents in memory with `fill`, then writes atomically.
pub fn atomic_write_with(
    path: &Path,
    fill: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    atomic_write(path, &buf)
}

/// Reads the data rows (everything after the header) of an existing CSV,
/// returning an empty list when the file does not exist yet.
pub fn read_csv_rows(path: &Path) -> Result<Vec<String>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text.lines().skip(1).map(str::to_owned).collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}
