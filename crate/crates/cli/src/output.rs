//! Output hygiene: files appear whole or not at all, and a run directory
//! carries a marker until the command that fills it finishes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use volcls_core::{Error, Result};

/// Present in an output directory while a command is still writing to it.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Marks `dir` as in progress. Dropping the guard without calling
/// [`RunGuard::finish`] leaves the marker behind.
pub struct RunGuard {
    marker: PathBuf,
}

impl RunGuard {
    pub fn start(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let marker = dir.join(INCOMPLETE_MARKER);
        write_atomic(&marker, format!("{command}\n").as_bytes())?;
        Ok(RunGuard { marker })
    }

    pub fn finish(self) -> Result<()> {
        fs::remove_file(&self.marker).map_err(|e| Error::io(&self.marker, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.json");
        write_json(&path, &serde_json::json!({"x": 1})).unwrap();
        assert!(path.exists());
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn marker_stays_until_finished() {
        let dir = tempfile::tempdir().unwrap();
        let guard = RunGuard::start(dir.path(), "train").unwrap();
        assert!(dir.path().join(INCOMPLETE_MARKER).exists());
        guard.finish().unwrap();
        assert!(!dir.path().join(INCOMPLETE_MARKER).exists());

        drop(RunGuard::start(dir.path(), "train").unwrap());
        assert!(dir.path().join(INCOMPLETE_MARKER).exists());
    }
}
