//! Stage manifests, file hashing and atomic writes.
//!
//! Every stage writes a manifest recording the sha256 of each file it
//! read and wrote, the hashes of the upstream manifests, and a fingerprint of
//! its configuration chained through the upstream fingerprints. Before a stage
//! runs, the whole upstream chain is re-verified against the current config
//! and the files on disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Cohort,
    Encode,
    Train,
    Eval,
    Tsne,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cohort => "cohort",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Tsne => "tsne",
            Stage::Report => "report",
        }
    }

    pub fn manifest_file(self) -> &'static str {
        match self {
            Stage::Synth => "synth.manifest.json",
            Stage::Cohort => "cohort.manifest.json",
            Stage::Encode => "encode.manifest.json",
            Stage::Train => "run-manifest.json",
            Stage::Eval => "eval.manifest.json",
            Stage::Tsne => "tsne.manifest.json",
            Stage::Report => "report.manifest.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub fingerprint: String,
    pub params: Value,
    /// Upstream manifest file → sha256 of its bytes.
    pub upstream: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Chains a stage's parameters onto its upstream fingerprints.
pub fn fingerprint(stage: Stage, params: &Value, upstream: &[String]) -> String {
    let doc = serde_json::json!({
        "stage": stage.name(),
        "params": params,
        "upstream": upstream,
    });
    sha256_hex(doc.to_string().as_bytes())
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(path.display().to_string()),
        _ => CliError::io(path, e),
    })
}

/// Writes a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|()| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

/// Output directory plus the bookkeeping for one stage run.
pub struct StageRun {
    pub out: PathBuf,
    pub stage: Stage,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    upstream: BTreeMap<String, String>,
}

impl StageRun {
    pub fn new(out: &Path, stage: Stage) -> Self {
        StageRun {
            out: out.to_path_buf(),
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            upstream: BTreeMap::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Loads an upstream manifest, checking it matches the expected
    /// fingerprint and that every file it produced is unchanged.
    pub fn require(
        &mut self,
        stage: Stage,
        expected_fingerprint: &str,
    ) -> CliResult<StageManifest> {
        let m = load_manifest(&self.out, stage)?;
        if m.fingerprint != expected_fingerprint {
            return Err(CliError::Stale(format!(
                "`{}` was produced with a different configuration; re-run the {} stage",
                stage.manifest_file(),
                stage.name()
            )));
        }
        verify_tree(&self.out, &m)?;
        let bytes = read_bytes(&self.out.join(stage.manifest_file()))?;
        self.upstream
            .insert(stage.manifest_file().to_string(), sha256_hex(&bytes));
        Ok(m)
    }

    /// Reads a file under the output directory, recording its hash.
    pub fn read(&mut self, rel: &str) -> CliResult<Vec<u8>> {
        let bytes = read_bytes(&self.path(rel))?;
        self.inputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Reads a file given by a user path, recording its hash under that path.
    pub fn read_external(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn finish(
        self,
        fingerprint: String,
        params: Value,
        summary: Value,
    ) -> CliResult<StageManifest> {
        let m = StageManifest {
            stage: self.stage.name().to_string(),
            fingerprint,
            params,
            upstream: self.upstream,
            inputs: self.inputs,
            outputs: self.outputs,
            summary,
        };
        let text = serde_json::to_string_pretty(&m).map_err(renalseq_core::Error::from)? + "\n";
        write_atomic(&self.out.join(self.stage.manifest_file()), text.as_bytes())?;
        Ok(m)
    }
}

fn check_hash(out: &Path, rel: &str, hash: &str) -> CliResult<()> {
    let bytes = read_bytes(&out.join(rel))?;
    if sha256_hex(&bytes) != hash {
        return Err(CliError::Tampered(rel.to_string()));
    }
    Ok(())
}

/// Checks a manifest's outputs and, recursively, every upstream manifest.
fn verify_tree(out: &Path, m: &StageManifest) -> CliResult<()> {
    for (rel, hash) in &m.outputs {
        check_hash(out, rel, hash)?;
    }
    for (rel, hash) in &m.upstream {
        check_hash(out, rel, hash)?;
        let path = out.join(rel);
        let parent: StageManifest =
            serde_json::from_slice(&read_bytes(&path)?).map_err(|e| CliError::invalid(&path, e))?;
        verify_tree(out, &parent)?;
    }
    Ok(())
}

pub fn load_manifest(out: &Path, stage: Stage) -> CliResult<StageManifest> {
    let path = out.join(stage.manifest_file());
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::invalid(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fingerprint_depends_on_params_and_upstream() {
        let a = fingerprint(Stage::Cohort, &json!({"w": 30}), &["x".into()]);
        assert_eq!(
            a,
            fingerprint(Stage::Cohort, &json!({"w": 30}), &["x".into()])
        );
        assert_ne!(
            a,
            fingerprint(Stage::Cohort, &json!({"w": 31}), &["x".into()])
        );
        assert_ne!(
            a,
            fingerprint(Stage::Cohort, &json!({"w": 30}), &["y".into()])
        );
        assert_ne!(
            a,
            fingerprint(Stage::Encode, &json!({"w": 30}), &["x".into()])
        );
    }

    #[test]
    fn tampered_output_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = StageRun::new(dir.path(), Stage::Cohort);
        run.write("cohort.jsonl", b"a\n").unwrap();
        run.finish("fp".into(), json!({}), json!({})).unwrap();

        let mut next = StageRun::new(dir.path(), Stage::Encode);
        next.require(Stage::Cohort, "fp").unwrap();
        assert!(matches!(
            next.require(Stage::Cohort, "other"),
            Err(CliError::Stale(_))
        ));

        std::fs::write(dir.path().join("cohort.jsonl"), b"b\n").unwrap();
        assert!(matches!(
            next.require(Stage::Cohort, "fp"),
            Err(CliError::Tampered(_))
        ));
        std::fs::remove_file(dir.path().join("cohort.jsonl")).unwrap();
        assert!(matches!(
            next.require(Stage::Cohort, "fp"),
            Err(CliError::MissingInput(_))
        ));
    }
}
