use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::exit::CliError;

/// A run directory that did not exist before this run.
pub struct RunDir {
    path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    /// Creates `path` (and missing parents). Refuses an existing path.
    pub fn create(path: &Path) -> Result<Self, CliError> {
        if path.exists() {
            return Err(CliError::config(format!(
                "output directory {} already exists; runs never write into an existing directory",
                path.display()
            )));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(&format!("creating {}", parent.display()), e))?;
        }
        fs::create_dir(path).map_err(|e| CliError::io(&format!("creating {}", path.display()), e))?;
        Ok(Self {
            path: path.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| CliError::io(&format!("writing {}", p.display()), e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(crate::exit::INTERNAL, e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        self.files.sort();
        manifest.files = self.files.clone();
        self.write_json("manifest.json", &manifest)?;
        Ok(self.path)
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Everything needed to reproduce a run directory. Holds no wall-clock data.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub files: Vec<String>,
    pub summary: BTreeMap<String, serde_json::Value>,
    /// The config exactly as read.
    pub config: String,
}

impl Manifest {
    pub fn new(command: &'static str, config_text: &str, seed: u64) -> Self {
        Self {
            tool: "madec",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: sha256_hex(config_text),
            seed,
            files: Vec::new(),
            summary: BTreeMap::new(),
            config: config_text.to_string(),
        }
    }

    pub fn note(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.summary.insert(key.to_string(), value.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_existing_directories() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(RunDir::create(tmp.path()).err().unwrap().code, crate::exit::CONFIG);
        let mut d = RunDir::create(&tmp.path().join("a/b")).unwrap();
        d.write("z.txt", "1").unwrap();
        d.write("a.txt", "2").unwrap();
        let path = d.finish(Manifest::new("run", "x = 1", 3)).unwrap();
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(path.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["files"], serde_json::json!(["a.txt", "z.txt"]));
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
