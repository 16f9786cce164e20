//! Output directories that clean up after a failed command.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// An output directory plus everything written into it so far.
///
/// Dropping an uncommitted `OutDir` removes those files, and the directory
/// itself when this run created it.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    created: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutDir {
    /// Refuses a non-empty directory unless `force` is set.
    pub fn prepare(root: &Path, force: bool) -> Result<Self> {
        let created = !root.exists();
        if created {
            fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        } else if !root.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", root.display())));
        } else if !force {
            let mut entries = fs::read_dir(root).map_err(|e| CliError::io(root, e))?;
            if entries.next().is_some() {
                return Err(CliError::usage(format!(
                    "{} is not empty; pass --force to write into it",
                    root.display()
                )));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            created,
            written: Vec::new(),
            committed: false,
        })
    }

    /// Path of an output file, tracked for cleanup.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        self.written.push(p.clone());
        p
    }

    /// A tracked subdirectory, created on the spot.
    pub fn subdir(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.file(name);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for p in self.written.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}
