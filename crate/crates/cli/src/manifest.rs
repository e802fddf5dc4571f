//! Run manifests: what a stage read, what it wrote, and digests of both.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = concat!("courier ", env!("CARGO_PKG_VERSION"));

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Keyed by role, e.g. `train` or `checkpoint`.
    pub inputs: BTreeMap<String, FileDigest>,
    /// Keyed by role; paths are relative to the manifest's directory.
    pub outputs: BTreeMap<String, FileDigest>,
    pub wall_time_s: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Every input or output whose current digest differs from the
    /// recorded one, or that is gone.
    pub fn mismatches(&self, manifest_path: &Path) -> Vec<String> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut bad = Vec::new();
        let mut check = |kind: &str, role: &str, path: PathBuf, want: &str| match sha256_file(&path) {
            Ok(got) if got == want => {}
            Ok(_) => bad.push(format!("{kind} {role} ({}) changed", path.display())),
            Err(_) => bad.push(format!("{kind} {role} ({}) is missing", path.display())),
        };
        for (role, d) in &self.inputs {
            check("input", role, d.path.clone(), &d.sha256);
        }
        for (role, d) in &self.outputs {
            check("output", role, base.join(&d.path), &d.sha256);
        }
        bad
    }

    pub fn output_path(&self, manifest_path: &Path, role: &str) -> Option<PathBuf> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.outputs.get(role).map(|d| base.join(&d.path))
    }
}

/// Everything that decides whether a stage must run.
pub struct StageSpec {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub manifest_path: PathBuf,
    pub inputs: BTreeMap<String, FileDigest>,
    pub force: bool,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub skipped: bool,
}

impl StageOutcome {
    pub fn output(&self, role: &str) -> PathBuf {
        self.manifest
            .output_path(&self.manifest_path, role)
            .unwrap_or_else(|| panic!("stage {} has no output {role}", self.manifest.stage))
    }
}

impl StageSpec {
    /// The stored manifest, if it still describes the current config,
    /// inputs and outputs.
    pub fn cached(&self) -> Option<RunManifest> {
        if self.force {
            return None;
        }
        let m = RunManifest::load(&self.manifest_path).ok()?;
        if m.stage != self.stage || m.config_hash != self.config_hash || m.seed != self.seed {
            return None;
        }
        if m.inputs != self.inputs {
            return None;
        }
        let bad = m.mismatches(&self.manifest_path);
        if !bad.is_empty() {
            log::info!("{}: rerunning, {}", self.stage, bad.join("; "));
            return None;
        }
        Some(m)
    }

    /// Runs `body` unless a valid manifest already covers this stage.
    /// `body` returns `(role, path)` for every file it wrote.
    pub fn run(
        self,
        body: impl FnOnce() -> Result<Vec<(&'static str, PathBuf)>>,
    ) -> Result<StageOutcome> {
        if let Some(manifest) = self.cached() {
            println!("{}: up to date ({})", self.stage, self.manifest_path.display());
            return Ok(StageOutcome {
                manifest,
                manifest_path: self.manifest_path,
                skipped: true,
            });
        }
        let started = std::time::Instant::now();
        let written = body()?;
        let base = self.manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut outputs = BTreeMap::new();
        for (role, path) in written {
            let rel = path.strip_prefix(&base).unwrap_or(&path).to_path_buf();
            outputs.insert(
                role.to_string(),
                FileDigest {
                    path: rel,
                    sha256: sha256_file(&path)?,
                },
            );
        }
        let manifest = RunManifest {
            stage: self.stage,
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            wall_time_s: started.elapsed().as_secs_f64(),
            tool_version: TOOL_VERSION.to_string(),
        };
        manifest.save(&self.manifest_path)?;
        Ok(StageOutcome {
            manifest,
            manifest_path: self.manifest_path,
            skipped: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tampered_output_is_detected_and_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let spec = |force| StageSpec {
            stage: "demo".into(),
            config_hash: "h".into(),
            seed: 1,
            manifest_path: dir.path().join("manifest.json"),
            inputs: BTreeMap::new(),
            force,
        };
        let out = dir.path().join("a.txt");
        let mut runs = 0;
        let mut body = || {
            runs += 1;
            std::fs::write(&out, "hello").unwrap();
            Ok(vec![("a", out.clone())])
        };
        assert!(!spec(false).run(&mut body).unwrap().skipped);
        assert!(spec(false).run(&mut body).unwrap().skipped);
        std::fs::write(&out, "tampered").unwrap();
        let m = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.mismatches(&dir.path().join("manifest.json")).len(), 1);
        assert!(!spec(false).run(&mut body).unwrap().skipped);
        assert!(!spec(true).run(&mut body).unwrap().skipped);
        assert_eq!(runs, 3);
    }
}
