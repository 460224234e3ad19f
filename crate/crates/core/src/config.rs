//! Run configuration read from a strict TOML file.
//!
//! Unknown keys are rejected. Relative paths resolve against the config
//! file's directory. The top-level `seed` feeds every seeded operation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalProtocol;
use crate::microdecoder::MicroDecoderConfig;
use crate::pairwise::{PairwiseConfig, StructureConfig, TrainConfig};
use crate::par::Execution;
use crate::ppr::{ContextThresholds, PprConfig, RpeConfig};
use crate::rerank::RerankConfig;
use crate::retrieval::RetrievalConfig;
use crate::scorers::RemoteConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("`{key}` is required for this command")]
    Missing { key: String },
    #[error("`{key}` points to {path}, which does not exist")]
    MissingFile { key: String, path: PathBuf },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Node JSONL input for `ingest`.
    pub nodes: Option<PathBuf>,
    /// Edge JSONL input for `ingest`.
    pub edges: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub ranked: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.85,
            valid: 0.05,
            test: 0.10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PprSection {
    pub alpha: f64,
    pub epsilon: f64,
    pub eta_near: f64,
    pub eta_far: f64,
}

impl Default for PprSection {
    fn default() -> Self {
        let p = PprConfig::default();
        let t = ContextThresholds::default();
        PprSection {
            alpha: p.alpha,
            epsilon: p.epsilon,
            eta_near: t.eta_near,
            eta_far: t.eta_far,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub supervision_fraction: f64,
    pub max_positives: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            epochs: t.epochs,
            supervision_fraction: t.supervision_fraction,
            max_positives: t.max_positives,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairwiseSection {
    pub dim: usize,
    pub katz_beta: f64,
    pub katz_horizon: usize,
    pub train: TrainSection,
}

impl Default for PairwiseSection {
    fn default() -> Self {
        let p = PairwiseConfig::default();
        PairwiseSection {
            dim: p.dim,
            katz_beta: p.katz_beta,
            katz_horizon: p.katz_horizon,
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub dim: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection { dim: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub candidates: usize,
    pub retrieved: usize,
    pub num_pairs: usize,
    pub k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalProtocol::default();
        EvalSection {
            candidates: p.candidates,
            retrieved: p.retrieved,
            num_pairs: p.num_pairs,
            k: p.k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KvBenchSection {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub m_s: usize,
    pub m_t: usize,
    pub n_c: usize,
}

impl Default for KvBenchSection {
    fn default() -> Self {
        let d = MicroDecoderConfig::default();
        KvBenchSection {
            vocab: d.vocab,
            dim: d.dim,
            layers: d.layers,
            heads: d.heads,
            m_s: 100,
            m_t: 5,
            n_c: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Heuristic,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub execution: Execution,
    pub provider: ProviderKind,
    pub paths: Paths,
    pub split: SplitSection,
    pub ppr: PprSection,
    pub rpe: RpeConfig,
    pub pairwise: PairwiseSection,
    pub embed: EmbedSection,
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
    pub eval: EvalSection,
    pub remote: RemoteConfig,
    pub kvbench: KvBenchSection,
}


fn key_of(msg: &str) -> String {
    msg.split(' ').next().unwrap_or("").trim_end_matches(':').to_string()
}

fn check(result: Result<(), String>) -> Result<(), ConfigError> {
    result.map_err(|msg| ConfigError::Invalid {
        key: key_of(&msg),
        msg,
    })
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Parse `path` and resolve its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text, path)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.nodes,
            &mut p.edges,
            &mut p.graph,
            &mut p.split,
            &mut p.embeddings,
            &mut p.params,
            &mut p.candidates,
            &mut p.ranked,
            &mut p.report,
        ].into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.split;
        for (key, r) in [("split.train", s.train), ("split.valid", s.valid), ("split.test", s.test)] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid(key, format!("must be positive, got {r}")));
            }
        }
        if (s.train + s.valid + s.test - 1.0).abs() > 1e-9 {
            return Err(invalid("split", "train + valid + test must equal 1"));
        }
        check(self.ppr_config().validate())?;
        let t = self.thresholds();
        for (key, eta) in [("ppr.eta_near", t.eta_near), ("ppr.eta_far", t.eta_far)] {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(invalid(key, format!("must be non-negative, got {eta}")));
            }
        }
        check(self.rpe.validate())?;
        check(self.structure().pairwise.validate())?;
        check(self.train_config().validate())?;
        if self.embed.dim == 0 {
            return Err(invalid("embed.dim", "must be positive"));
        }
        check(self.retrieval.validate())?;
        self.protocol().validate().map_err(|e| ConfigError::Invalid {
            key: key_of(&e.to_string().replace("invalid protocol: ", "")),
            msg: e.to_string(),
        })?;
        if self.provider == ProviderKind::Remote {
            check(self.remote.validate())?;
        }
        let kv = &self.kvbench;
        for (key, v) in [("kvbench.m_s", kv.m_s), ("kvbench.m_t", kv.m_t), ("kvbench.n_c", kv.n_c)] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        self.decoder_config()
            .validate()
            .map_err(|e| invalid("kvbench", e.to_string()))?;
        Ok(())
    }

    pub fn ppr_config(&self) -> PprConfig {
        PprConfig {
            alpha: self.ppr.alpha,
            epsilon: self.ppr.epsilon,
        }
    }

    pub fn thresholds(&self) -> ContextThresholds {
        ContextThresholds {
            eta_near: self.ppr.eta_near,
            eta_far: self.ppr.eta_far,
        }
    }

    pub fn structure(&self) -> StructureConfig {
        StructureConfig {
            ppr: self.ppr_config(),
            thresholds: self.thresholds(),
            rpe: self.rpe,
            pairwise: PairwiseConfig {
                dim: self.pairwise.dim,
                katz_beta: self.pairwise.katz_beta,
                katz_horizon: self.pairwise.katz_horizon,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.pairwise.train;
        TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            seed: self.seed,
            supervision_fraction: t.supervision_fraction,
            max_positives: t.max_positives,
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            candidates: self.eval.candidates,
            retrieved: self.eval.retrieved,
            num_pairs: self.eval.num_pairs,
            seed: self.seed,
            k: self.eval.k,
        }
    }

    pub fn decoder_config(&self) -> MicroDecoderConfig {
        let kv = &self.kvbench;
        MicroDecoderConfig {
            vocab: kv.vocab,
            dim: kv.dim,
            layers: kv.layers,
            heads: kv.heads,
            max_seq: (kv.m_s + kv.m_t).max(1),
            seed: self.seed,
        }
    }

    /// The path under `paths.<key>`, which must be set.
    pub fn path(&self, key: &str) -> Result<&Path, ConfigError> {
        let p = &self.paths;
        let slot = match key {
            "nodes" => &p.nodes,
            "edges" => &p.edges,
            "graph" => &p.graph,
            "split" => &p.split,
            "embeddings" => &p.embeddings,
            "params" => &p.params,
            "candidates" => &p.candidates,
            "ranked" => &p.ranked,
            "report" => &p.report,
            _ => &None,
        };
        slot.as_deref().ok_or_else(|| ConfigError::Missing {
            key: format!("paths.{key}"),
        })
    }

    /// Like [`RunConfig::path`], and the file must exist.
    pub fn existing_path(&self, key: &str) -> Result<&Path, ConfigError> {
        let path = self.path(key)?;
        if !path.exists() {
            return Err(ConfigError::MissingFile {
                key: format!("paths.{key}"),
                path: path.to_path_buf(),
            });
        }
        Ok(path)
    }
}
