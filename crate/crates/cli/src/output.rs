use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Files of one run, all under `<root>/<command>/`.
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> CliResult<Self> {
        let dir = root.join(command);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Path for a new artifact, remembered for the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_owned());
        self.dir.join(name)
    }

    /// Writes `rows` with a header taken from the row type's field names.
    pub fn write_csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> CliResult<()> {
        let path = self.artifact(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize)]
pub struct Versions {
    pub rotout: &'static str,
    pub manifest_format: u32,
}

/// Config echo and provenance for a run. Timestamps live only here so that
/// CSV files of identical runs compare equal.
#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub command: &'a str,
    pub seed: u64,
    pub config_file: Option<&'a Path>,
    pub config: &'a C,
    pub execution: &'a str,
    pub versions: Versions,
    pub outputs: &'a [String],
    pub started_unix_seconds: f64,
    pub elapsed_seconds: f64,
}

pub const VERSIONS: Versions = Versions {
    rotout: env!("CARGO_PKG_VERSION"),
    manifest_format: 1,
};
