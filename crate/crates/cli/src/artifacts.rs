//! On-disk layout of a run directory and typed load/store helpers.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use plugin_se::downstream::{DownstreamCheckpoint, DownstreamModel, TaskDescriptor};
use plugin_se::enhancer::{EnhancerCheckpoint, MaskEnhancer};
use plugin_se::signal::{make_corpus, Batch, CorpusConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::CliError;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn corpus_manifest(&self, split: &str) -> PathBuf {
        self.path(format!("corpus/{split}.json"))
    }

    pub fn enhancer(&self) -> PathBuf {
        self.path("enhancer.json")
    }

    pub fn downstream(&self, d: TaskDescriptor) -> PathBuf {
        let tag = if d.noise_injection() { "ni" } else { "clean" };
        self.path(format!("downstream/{}_{tag}.json", d.task().name()))
    }

    pub fn gate_targets(&self) -> PathBuf {
        self.path("gate/targets.json")
    }

    pub fn gate_traces(&self) -> PathBuf {
        self.path("gate/traces.json")
    }

    pub fn predictor(&self) -> PathBuf {
        self.path("predictor.json")
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.path(format!("stages/{name}.json"))
    }

    /// Reads and parses a JSON artifact produced by `producer`.
    pub fn load<T: DeserializeOwned>(&self, path: &Path, producer: &'static str) -> Result<T, CliError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::MissingArtifact { path: path.to_path_buf(), producer })
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text)
            .map_err(|e| CliError::CorruptArtifact { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn store<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), CliError> {
        write_bytes(path, serde_json::to_string_pretty(value).expect("artifact serializes").as_bytes())
    }

    pub fn load_corpus(&self, split: &str) -> Result<Batch, CliError> {
        let path = self.corpus_manifest(split);
        let m: CorpusManifest = self.load(&path, "synth")?;
        let batch = make_corpus(&m.config)?;
        let sum = corpus_checksum(&batch);
        if sum != m.sha256 {
            return Err(CliError::CorruptArtifact {
                path,
                message: format!("regenerated corpus checksum {sum} differs from manifest {}", m.sha256),
            });
        }
        Ok(batch)
    }

    pub fn load_enhancer(&self) -> Result<MaskEnhancer, CliError> {
        let ck: EnhancerCheckpoint = self.load(&self.enhancer(), "train-enhancer")?;
        Ok(MaskEnhancer::from_checkpoint(&ck)?)
    }

    pub fn load_downstream(&self, d: TaskDescriptor) -> Result<DownstreamModel, CliError> {
        let ck: DownstreamCheckpoint = self.load(&self.downstream(d), "train-downstream")?;
        let m = DownstreamModel::from_checkpoint(&ck)?;
        if m.descriptor() != d {
            return Err(CliError::CorruptArtifact {
                path: self.downstream(d),
                message: format!("checkpoint holds {} instead of {d}", m.descriptor()),
            });
        }
        Ok(m)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// The corpus is stored as its generating config; the checksum guards
/// against generator drift between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub items: usize,
    pub sha256: String,
}

/// SHA-256 over the little-endian bytes of every clean, noise and mix sample.
pub fn corpus_checksum(batch: &Batch) -> String {
    let mut bytes = Vec::new();
    for it in batch.items() {
        for w in [&it.clean, &it.noise, &it.mix] {
            for v in w.samples() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written by every subcommand next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub format_version: u32,
    pub stage: String,
    pub root_seed: u64,
    pub config_sha256: String,
    pub wall_clock_s: f64,
    pub outputs: Vec<OutputFile>,
    pub metrics: serde_json::Value,
}

impl StageRecord {
    pub fn new(
        run: &RunDir,
        stage: &str,
        root_seed: u64,
        config_sha256: String,
        elapsed: Duration,
        outputs: &[PathBuf],
        metrics: serde_json::Value,
    ) -> Result<Self, CliError> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    path: p.strip_prefix(run.root()).unwrap_or(p).to_path_buf(),
                    sha256: file_sha256(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Self {
            format_version: ARTIFACT_FORMAT_VERSION,
            stage: stage.to_string(),
            root_seed,
            config_sha256,
            wall_clock_s: elapsed.as_secs_f64(),
            outputs,
            metrics,
        })
    }
}
