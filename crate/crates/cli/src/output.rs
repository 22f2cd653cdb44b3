//! Output directory handling: the lockfile and artifact writers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::Failure;

const LOCK: &str = ".panelcf.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::config("output_dir", format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::config(
                "output_locked",
                format!("{} exists; another run is writing to this directory", path.display()),
            )),
            Err(e) => Err(Failure::config("output_dir", format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes artifacts into the output directory and remembers their names.
pub struct Outputs {
    dir: PathBuf,
    pub artifacts: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Outputs {
        Outputs {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| Failure::data("io", format!("{}: {e}", path.display())))?;
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::data("serialize", e.to_string()))?;
        text.push('\n');
        self.text(name, &text)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Failure::data("io", e.to_string()))
    }

    /// Serialize `rows` as a headed CSV table.
    pub fn csv_rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), Failure> {
        let w = self.create(name)?;
        let mut c = csv::Writer::from_writer(w);
        for r in rows {
            c.serialize(r).map_err(|e| Failure::data("io", e.to_string()))?;
        }
        c.flush().map_err(|e| Failure::data("io", e.to_string()))
    }

    /// Hand the writer to a library routine that writes its own CSV.
    pub fn csv_with<F>(&mut self, name: &str, f: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut BufWriter<File>) -> panelcf::Result<()>,
    {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush().map_err(|e| Failure::data("io", e.to_string()))
    }
}
