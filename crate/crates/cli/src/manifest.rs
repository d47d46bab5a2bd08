use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use gnss_fsl::corpus::{CorpusRecord, MANIFEST_FILE};

/// A file produced by a stage, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Link to the manifest of a stage this one consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Upstream {
    pub stage: String,
    pub manifest: PathBuf,
    pub hash: String,
}

/// Record of one stage run. `hash` covers every other field, and
/// `upstream` carries the hashes of the consumed manifests, so editing any
/// link of the chain is detectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config: Option<PipelineConfig>,
    pub config_hash: Option<String>,
    pub master_seed: u64,
    pub corpus_hash: String,
    pub upstream: Vec<Upstream>,
    pub checkpoints: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, f64>,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Hash over the corpus manifest followed by every image file in record order.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_bytes(&manifest_path)?;
    let records: Vec<CorpusRecord> =
        serde_json::from_slice(&manifest).map_err(|e| CliError::Json { path: manifest_path, source: e })?;
    let mut h = Sha256::new();
    h.update(&manifest);
    for r in &records {
        h.update(read_bytes(&dir.join(&r.file))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn manifest_file(stage: &str) -> String {
    format!("run-{stage}.json")
}

impl RunManifest {
    pub fn new(stage: &str, config: Option<&PipelineConfig>, master_seed: u64, corpus_hash: String) -> Self {
        Self {
            stage: stage.to_string(),
            config: config.cloned(),
            config_hash: config.map(PipelineConfig::hash),
            master_seed,
            corpus_hash,
            upstream: Vec::new(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            hash: String::new(),
        }
    }

    fn content_hash(&self) -> String {
        let unsealed = Self { hash: String::new(), ..self.clone() };
        sha256_hex(serde_json::to_string(&unsealed).expect("manifest serializes").as_bytes())
    }

    /// Records an existing file under `dir` as an artifact.
    pub fn artifact(dir: &Path, rel: &str) -> Result<Artifact> {
        Ok(Artifact { path: rel.to_string(), sha256: sha256_hex(&read_bytes(&dir.join(rel))?) })
    }

    pub fn link(&mut self, upstream: &RunManifest, path: &Path) {
        self.upstream.push(Upstream { stage: upstream.stage.clone(), manifest: path.to_path_buf(), hash: upstream.hash.clone() });
    }

    /// Seals the hash and writes `run-{stage}.json` into `dir`.
    pub fn write(mut self, dir: &Path) -> Result<RunManifest> {
        self.hash = self.content_hash();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_bytes(&dir.join(manifest_file(&self.stage)), text.as_bytes())?;
        Ok(self)
    }

    /// Loads and verifies a manifest: its own hash and every artifact it references.
    /// `consumer` names the stage asking, for error messages.
    pub fn load(path: &Path, consumer: &str) -> Result<RunManifest> {
        if !path.exists() {
            return Err(CliError::MissingArtifact { stage: consumer.to_string(), path: path.to_path_buf() });
        }
        let text = read_text(path)?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Json { path: path.to_path_buf(), source: e })?;
        if m.content_hash() != m.hash {
            return Err(CliError::Tampered { path: path.to_path_buf() });
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        for a in m.checkpoints.iter().chain(&m.outputs) {
            let file = dir.join(&a.path);
            if !file.exists() {
                return Err(CliError::MissingArtifact { stage: consumer.to_string(), path: file });
            }
            if sha256_hex(&read_bytes(&file)?) != a.sha256 {
                return Err(CliError::Tampered { path: file });
            }
        }
        Ok(m)
    }

    /// Refuses to build on a stage run with a different config unless `allow` is set.
    pub fn check_config(&self, cfg: &PipelineConfig, allow: bool) -> Result<()> {
        match &self.config_hash {
            Some(h) if *h != cfg.hash() && !allow => {
                Err(CliError::ConfigMismatch { stage: self.stage.clone(), expected: h.clone(), found: cfg.hash() })
            }
            Some(h) if *h != cfg.hash() => {
                log::warn!("config differs from upstream stage {}; continuing on request", self.stage);
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seal_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        write_bytes(&dir.path().join("a.csv"), b"x\n1\n").unwrap();
        let mut m = RunManifest::new("eval", Some(&PipelineConfig::default()), 3, "c".into());
        m.outputs.push(RunManifest::artifact(dir.path(), "a.csv").unwrap());
        let m = m.write(dir.path()).unwrap();
        let path = dir.path().join(manifest_file("eval"));
        assert_eq!(RunManifest::load(&path, "t").unwrap(), m);

        write_bytes(&dir.path().join("a.csv"), b"x\n2\n").unwrap();
        assert!(matches!(RunManifest::load(&path, "t"), Err(CliError::Tampered { .. })));
        fs::remove_file(dir.path().join("a.csv")).unwrap();
        assert!(matches!(RunManifest::load(&path, "t"), Err(CliError::MissingArtifact { .. })));

        write_bytes(&dir.path().join("a.csv"), b"x\n1\n").unwrap();
        let edited = read_text(&path).unwrap().replace("\"master_seed\": 3", "\"master_seed\": 4");
        write_bytes(&path, edited.as_bytes()).unwrap();
        assert!(matches!(RunManifest::load(&path, "t"), Err(CliError::Tampered { .. })));
    }

    #[test]
    fn config_guard() {
        let cfg = PipelineConfig::default();
        let m = RunManifest::new("train", Some(&cfg), 0, String::new());
        let other = PipelineConfig { epochs: 1, ..cfg.clone() };
        assert!(m.check_config(&cfg, false).is_ok());
        assert!(matches!(m.check_config(&other, false), Err(CliError::ConfigMismatch { .. })));
        assert!(m.check_config(&other, true).is_ok());
        assert!(RunManifest::new("gen-data", None, 0, String::new()).check_config(&other, false).is_ok());
    }
}
