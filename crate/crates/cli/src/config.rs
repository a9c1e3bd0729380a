//! Experiment configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use plugin_se::downstream::{DownstreamTrainConfig, Task, TaskDescriptor};
use plugin_se::enhancer::{EnhancerLoss, EnhancerTrainConfig, StftConfig};
use plugin_se::gate::GateOptConfig;
use plugin_se::predictor::PredictorConfig;
use plugin_se::rng::derive_seed;
use plugin_se::signal::CorpusConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    /// Root seed; every stage seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub enhancer: EnhancerSection,
    #[serde(default = "default_downstream")]
    pub downstream: Vec<DownstreamSection>,
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            corpus: CorpusSection::default(),
            enhancer: EnhancerSection::default(),
            downstream: default_downstream(),
            gate: GateSection::default(),
            predictor: PredictorSection::default(),
            infer: InferSection::default(),
            report: ReportSection::default(),
        }
    }
}

fn default_downstream() -> Vec<DownstreamSection> {
    [(Task::Sv, false), (Task::Sv, true), (Task::Asr, true), (Task::Representation, false)]
        .into_iter()
        .map(|(task, noise_injection)| DownstreamSection {
            task,
            noise_injection,
            train: DownstreamTrainConfig::default(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub train: CorpusConfig,
    /// Held-out corpus for evaluation, gate optimization and sweeps.
    pub eval: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            train: CorpusConfig { snr_grid_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0], ..CorpusConfig::default() },
            eval: CorpusConfig { items: 40, snr_grid_db: vec![-5.0], ..CorpusConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerSection {
    pub loss: EnhancerLoss,
    pub hidden: Vec<usize>,
    pub stft: StftConfig,
    pub train: EnhancerTrainConfig,
    /// Downstream model used by the `cm` loss.
    pub cm_downstream: Option<TaskDescriptor>,
}

impl Default for EnhancerSection {
    fn default() -> Self {
        Self {
            loss: EnhancerLoss::Ct,
            hidden: vec![128, 128],
            stft: StftConfig::default(),
            train: EnhancerTrainConfig::default(),
            cm_downstream: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSection {
    pub task: Task,
    pub noise_injection: bool,
    #[serde(default)]
    pub train: DownstreamTrainConfig,
}

impl DownstreamSection {
    pub fn descriptor(&self) -> TaskDescriptor {
        TaskDescriptor::of(self.task, self.noise_injection)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub optimizer: GateOptConfig,
    /// Descriptors to optimize; defaults to SE plus every configured downstream model.
    pub descriptors: Option<Vec<TaskDescriptor>>,
    /// Grid step of the exhaustive oracle run next to each optimization.
    pub oracle_step: f64,
    pub sweep_points: usize,
    pub sweep_snr_db: Vec<f64>,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            optimizer: GateOptConfig::default(),
            descriptors: None,
            oracle_step: 0.01,
            sweep_points: 11,
            sweep_snr_db: vec![-5.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Targets produced by `optimize-gate`.
    Optimized,
    /// The bundled published table.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub targets: TargetSource,
    pub train: PredictorConfig,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self { targets: TargetSource::Optimized, train: PredictorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub task: Task,
    pub noise_injection: bool,
    /// 16-bit mono WAV; when absent, an eval corpus item is remixed at `snr_db`.
    pub input: Option<PathBuf>,
    pub item: usize,
    pub snr_db: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { task: Task::Sv, noise_injection: false, input: None, item: 0, snr_db: -5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Tasks whose noise-injected and clean-trained targets are compared.
    pub ordering_tasks: Vec<Task>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { ordering_tasks: vec![Task::Sv] }
    }
}

/// Stage salts for seed derivation.
mod salt {
    pub const TRAIN_CORPUS: u64 = 1;
    pub const EVAL_CORPUS: u64 = 2;
    pub const ENHANCER: u64 = 3;
    pub const DOWNSTREAM: u64 = 4;
    pub const PREDICTOR: u64 = 5;
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Config(format!("config file {} not found", path.display())),
            _ => CliError::Io(e),
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |what: &str, e: plugin_se::Error| CliError::Config(format!("{what}: {e}"));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "unsupported format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.corpus.train.validate().map_err(|e| bad("corpus.train", e))?;
        self.corpus.eval.validate().map_err(|e| bad("corpus.eval", e))?;
        self.enhancer.stft.validate().map_err(|e| bad("enhancer.stft", e))?;
        self.enhancer.train.loss.validate().map_err(|e| bad("enhancer.train.loss", e))?;
        if self.enhancer.hidden.iter().any(|&h| h == 0) {
            return Err(CliError::Config("enhancer.hidden widths must be positive".into()));
        }
        if self.enhancer.loss == EnhancerLoss::Cm {
            let d = self
                .enhancer
                .cm_downstream
                .ok_or_else(|| CliError::Config("enhancer.loss = cm needs enhancer.cm_downstream".into()))?;
            if !self.downstream.iter().any(|s| s.descriptor() == d) {
                return Err(CliError::Config(format!("enhancer.cm_downstream {d} is not a configured downstream model")));
            }
        }
        let mut seen = Vec::new();
        for (i, d) in self.downstream.iter().enumerate() {
            if d.task == Task::Se {
                return Err(CliError::Config(format!("downstream[{i}]: SE uses the identity downstream and is not trained")));
            }
            if seen.contains(&d.descriptor()) {
                return Err(CliError::Config(format!("downstream[{i}]: duplicate descriptor {}", d.descriptor())));
            }
            d.train.stft.validate().map_err(|e| bad(&format!("downstream[{i}].train.stft"), e))?;
            seen.push(d.descriptor());
        }
        if !(self.gate.oracle_step > 0.0 && self.gate.oracle_step <= 1.0) {
            return Err(CliError::Config("gate.oracle_step must be in (0, 1]".into()));
        }
        if self.gate.sweep_points < 2 {
            return Err(CliError::Config("gate.sweep_points must be at least 2".into()));
        }
        if self.gate.sweep_snr_db.iter().any(|s| !s.is_finite()) {
            return Err(CliError::Config("gate.sweep_snr_db must be finite".into()));
        }
        self.predictor.train.validate().map_err(|e| bad("predictor.train", e))?;
        if !self.infer.snr_db.is_finite() {
            return Err(CliError::Config("infer.snr_db must be finite".into()));
        }
        Ok(())
    }

    /// Config with every stage seed resolved from the root seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let stage = |salt: u64, local: u64| derive_seed(derive_seed(self.seed, salt), local);
        c.corpus.train.seed = stage(salt::TRAIN_CORPUS, self.corpus.train.seed);
        c.corpus.eval.seed = stage(salt::EVAL_CORPUS, self.corpus.eval.seed);
        c.enhancer.train.seed = stage(salt::ENHANCER, self.enhancer.train.seed);
        for (i, d) in c.downstream.iter_mut().enumerate() {
            d.train.seed = stage(salt::DOWNSTREAM + 16 * i as u64, d.train.seed);
        }
        c.predictor.train.seed = stage(salt::PREDICTOR, self.predictor.train.seed);
        c
    }

    pub fn gate_descriptors(&self) -> Vec<TaskDescriptor> {
        self.gate.descriptors.clone().unwrap_or_else(|| {
            std::iter::once(TaskDescriptor::of(Task::Se, false))
                .chain(self.downstream.iter().map(DownstreamSection::descriptor))
                .collect()
        })
    }

    /// SHA-256 of the canonical JSON of the (unresolved) config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"format_version": 1}"#).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.enhancer.train.loss.lambda_ct, 0.01);
        assert_eq!(c.predictor.train.hidden, vec![256, 256, 256]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"format_version": 1, "extra": 0}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"format_version": 1, "gate": {"step": 0.1}}"#).is_err());
    }

    #[test]
    fn semantic_errors_rejected() {
        let mut c = ExperimentConfig { format_version: 2, ..Default::default() };
        assert!(c.validate().is_err());
        c.format_version = 1;
        c.downstream.push(c.downstream[0].clone());
        assert!(c.validate().is_err());
        let c = ExperimentConfig { gate: GateSection { sweep_points: 1, ..Default::default() }, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_follow_root() {
        let a = ExperimentConfig::default().resolved();
        assert_ne!(a.corpus.train.seed, a.corpus.eval.seed);
        assert_ne!(a.downstream[0].train.seed, a.downstream[1].train.seed);
        let b = ExperimentConfig { seed: 9, ..Default::default() }.resolved();
        assert_ne!(a.corpus.train.seed, b.corpus.train.seed);
        assert_eq!(a, ExperimentConfig::default().resolved());
    }
}
