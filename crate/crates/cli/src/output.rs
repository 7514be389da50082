//! Output directory handling and the command error type.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! value reads back to the identical `f64`.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::manifest::{digest_file, FileDigest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sae_core::Error),
    #[error("{}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Input(_) => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// The output directory and the files written into it, in write order.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn file(&mut self, name: &str) -> CliResult<File> {
        let path = self.path(name);
        let f = File::create(&path).map_err(|source| CliError::Output { path, source })?;
        self.record(name);
        Ok(f)
    }

    pub fn csv(&mut self, name: &str, header: &[&str]) -> CliResult<csv::Writer<File>> {
        let mut w = csv::Writer::from_writer(self.file(name)?);
        w.write_record(header)?;
        Ok(w)
    }

    pub fn digests(&self) -> CliResult<Vec<FileDigest>> {
        self.files
            .iter()
            .map(|f| Ok(FileDigest { path: f.clone(), sha256: digest_file(&self.path(f))? }))
            .collect()
    }
}

pub fn finish(mut w: csv::Writer<File>, name: &str) -> CliResult<()> {
    w.flush().map_err(|source| CliError::Output { path: name.into(), source })
}

pub fn num(x: f64) -> String {
    x.to_string()
}
