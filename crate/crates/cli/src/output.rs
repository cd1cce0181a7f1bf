//! All-or-nothing output: files are collected in memory and only written
//! once the whole command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    /// Write every file to a sibling temporary, then rename them all into
    /// place. On failure the temporaries and any files renamed so far are
    /// removed.
    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        let cleanup = |staged: &[(PathBuf, PathBuf)], placed: &[PathBuf]| {
            for (tmp, _) in staged {
                let _ = fs::remove_file(tmp);
            }
            for p in placed {
                let _ = fs::remove_file(p);
            }
        };
        for (path, bytes) in &self.files {
            let tmp = temp_name(path);
            let result = path
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .map_or(Ok(()), fs::create_dir_all)
                .and_then(|_| fs::write(&tmp, bytes));
            if let Err(e) = result {
                cleanup(&staged, &[]);
                let _ = fs::remove_file(&tmp);
                return Err(CliError::io(format!("cannot write {}: {e}", path.display())));
            }
            staged.push((tmp, path.clone()));
        }
        let mut placed = Vec::new();
        for (i, (tmp, path)) in staged.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, path) {
                cleanup(&staged[i..], &placed);
                return Err(CliError::io(format!("cannot write {}: {e}", path.display())));
            }
            placed.push(path.clone());
        }
        Ok(placed)
    }
}

fn temp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".partial-{}", std::process::id()));
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new();
        out.add(dir.path().join("a/x.txt"), b"x".to_vec());
        out.add(dir.path().join("b/y.txt"), b"y".to_vec());
        let placed = out.commit().unwrap();
        assert_eq!(placed.len(), 2);
        assert_eq!(fs::read(dir.path().join("b/y.txt")).unwrap(), b"y");
    }

    #[test]
    fn failed_commit_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        // a regular file where a directory is needed makes the second write fail
        fs::write(dir.path().join("blocker"), b"").unwrap();
        let mut out = Outputs::new();
        out.add(dir.path().join("ok.txt"), b"fine".to_vec());
        out.add(dir.path().join("blocker/nope.txt"), b"no".to_vec());
        assert!(out.commit().is_err());
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("blocker")]);
    }
}
