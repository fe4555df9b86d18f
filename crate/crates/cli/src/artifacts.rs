//! Output files that are removed again if the command fails.

use std::fs;
use std::path::{Path, PathBuf};

use dhc_core::raster::{encode_float_map, FloatMap};
use dhc_core::{Error, Result};

/// Tracks written files; unless committed, dropping it deletes them.
#[derive(Default)]
pub struct Artifacts {
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
    committed: bool,
}

impl Artifacts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` (and parents), remembering what did not exist before.
    pub fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut p = Some(dir);
        while let Some(d) = p {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            p = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        missing.reverse();
        self.created_dirs.extend(missing);
        Ok(())
    }

    pub fn bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        self.written.push(path.to_path_buf());
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn text(&mut self, path: &Path, text: &str) -> Result<()> {
        self.bytes(path, text.as_bytes())
    }

    pub fn map(&mut self, path: &Path, map: &FloatMap) -> Result<()> {
        self.bytes(path, &encode_float_map(map)?)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        for d in self.created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}
