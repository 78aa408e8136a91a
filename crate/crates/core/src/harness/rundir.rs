use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthworld::VOCAB_VERSION;

use super::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const FORMAT_VERSION: u32 = 1;

/// Relative path to content digest for every artifact in a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab_version: u32,
    pub files: BTreeMap<String, String>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            vocab_version: VOCAB_VERSION,
            files: BTreeMap::new(),
        }
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A run directory whose every write is recorded in the manifest and whose
/// every read is checked against it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Opens or creates `root`, refusing a manifest written by another
    /// format or vocabulary version.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| Error::Manifest(format!("unreadable manifest: {e}")))?;
            if m.format_version != FORMAT_VERSION || m.vocab_version != VOCAB_VERSION {
                return Err(Error::Manifest(format!(
                    "run directory has format {} / vocabulary {}, expected {FORMAT_VERSION} / {VOCAB_VERSION}",
                    m.format_version, m.vocab_version
                )));
            }
            m
        } else {
            Manifest::default()
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Listed in the manifest and present on disk.
    pub fn has(&self, rel: &str) -> bool {
        self.manifest.files.contains_key(rel) && self.path(rel).exists()
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        self.manifest.files.insert(rel.to_string(), digest(bytes));
        self.save_manifest()
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let expected = self
            .manifest
            .files
            .get(rel)
            .ok_or_else(|| Error::Manifest(format!("{rel} is not listed in the manifest")))?;
        let bytes = fs::read(self.path(rel))?;
        let actual = digest(&bytes);
        if &actual != expected {
            return Err(Error::Manifest(format!(
                "{rel} digest {actual} does not match the manifest"
            )));
        }
        Ok(bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(rel)?)?)
    }

    pub fn remove(&mut self, rel: &str) -> Result<()> {
        if self.manifest.files.remove(rel).is_some() {
            let path = self.path(rel);
            if path.exists() {
                fs::remove_file(path)?;
            }
            self.save_manifest()?;
        }
        Ok(())
    }

    /// Checks every listed file.
    pub fn verify(&self) -> Result<()> {
        for rel in self.manifest.files.keys() {
            self.read(rel)?;
        }
        Ok(())
    }

    /// Records `cfg` verbatim. A directory created under a different
    /// configuration is refused unless the difference only extends the run
    /// (more iterations, techniques or seeds, or a moved directory).
    pub fn bind_config(&mut self, cfg: &RunConfig) -> Result<()> {
        let text = cfg.to_toml();
        if self.has(CONFIG) {
            let old = String::from_utf8_lossy(&self.read(CONFIG)?).into_owned();
            let old = RunConfig::from_toml(&old, &[])?;
            if extension_invariant(&old) != extension_invariant(cfg) {
                return Err(Error::Manifest(format!(
                    "{} was created with a different configuration",
                    self.root.display()
                )));
            }
        }
        self.write(CONFIG, text.as_bytes())
    }

    fn save_manifest(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        let path = self.path(MANIFEST);
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn extension_invariant(cfg: &RunConfig) -> RunConfig {
    let d = RunConfig::default();
    RunConfig {
        run_dir: d.run_dir,
        seeds: d.seeds,
        techniques: d.techniques,
        iterations: d.iterations,
        probe_every: d.probe_every,
        ..cfg.clone()
    }
}
