//! Exclusive lock on an output directory, held for the life of a command.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const LOCK_FILE: &str = ".hgrasp.lock";

pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Create the directory if needed and take its lock. Fails when another
    /// process holds it; a stale lock from a crashed run must be removed by hand.
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Runtime(format!(
                    "{} is locked by process {} (remove {} if that run is gone)",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Runtime(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(CliError::Runtime(_))));
        drop(a);
        assert!(!dir.path().join(LOCK_FILE).exists());
        let _b = OutputLock::acquire(dir.path()).unwrap();
    }
}
