//! Output directory handling. Every file the CLI writes goes through
//! [`OutDir::file`], which refuses names that would escape the directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `name` inside the directory. Absolute names and any `..`
    /// component are rejected.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        let rel = Path::new(name);
        if name.is_empty() {
            return Err(CliError::Config("empty output file name".into()));
        }
        for c in rel.components() {
            match c {
                Component::Normal(_) | Component::CurDir => {}
                _ => {
                    return Err(CliError::Config(format!(
                        "output name {name:?} must be a relative path inside the output directory"
                    )))
                }
            }
        }
        Ok(self.root.join(rel))
    }

    pub fn file(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.path(name)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    }

    pub fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let (path, mut w) = self.file(name)?;
        w.write_all(contents).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
