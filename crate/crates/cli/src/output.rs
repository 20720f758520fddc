//! Output files written atomically and removed again if the command fails.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks every file a command writes. Unless [`OutputSet::commit`] is
/// called, dropping the set deletes them.
#[derive(Debug, Default)]
pub struct OutputSet {
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
        if !self.written.iter().any(|p| p == path) {
            self.written.push(path.to_path_buf());
        }
        Ok(())
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("sub/a.txt");
        {
            let mut out = OutputSet::new();
            out.write(&a, b"x").unwrap();
            assert!(a.exists());
            assert!(!dir.path().join("sub/a.txt.partial").exists());
        }
        assert!(!a.exists());

        let mut out = OutputSet::new();
        out.write(&a, b"y").unwrap();
        assert_eq!(out.commit(), vec![a.clone()]);
        assert_eq!(fs::read(&a).unwrap(), b"y");
    }
}
