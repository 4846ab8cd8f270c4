//! Run configuration, persisted next to the dataset as `run_config.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cmaes::{default_population_size, CmaConfig};
use crate::oracle::client::{HttpTransport, OracleClient, ProcessTransport};
use crate::oracle::synthetic::{SyntheticWorld, DEFAULT_DISTANCE_NORMALIZER};
use crate::oracle::{DistanceBackend, GeneratorBackend, OracleError};
use crate::sampler::SamplerConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Where generator and decision models live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleEndpoint {
    /// In-process stand-in; images are the latents themselves.
    Synthetic { distance_normalizer: f64 },
    /// A child process speaking the NDJSON protocol on stdin/stdout. Image
    /// references it returns are resolved against the dataset root.
    Process { program: String, #[serde(default)] args: Vec<String> },
    /// A server exposing `POST /v1/oracle`.
    Http { url: String },
}

impl Default for OracleEndpoint {
    fn default() -> Self {
        Self::Synthetic { distance_normalizer: DEFAULT_DISTANCE_NORMALIZER }
    }
}

pub type Backends = (Arc<dyn GeneratorBackend>, Arc<dyn DistanceBackend>);

impl OracleEndpoint {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Self::Synthetic { .. })
    }

    pub fn connect(&self, dataset_root: &Path, dim: usize) -> Result<Backends, OracleError> {
        match self {
            Self::Synthetic { distance_normalizer } => {
                let w = Arc::new(SyntheticWorld::new(dataset_root, dim, *distance_normalizer));
                Ok((w.clone(), w))
            }
            Self::Process { program, args } => {
                let c = Arc::new(OracleClient::new(Box::new(ProcessTransport::spawn(program, args)?)));
                Ok((c.clone(), c))
            }
            Self::Http { url } => {
                let c = Arc::new(OracleClient::new(Box::new(HttpTransport::new(url))));
                Ok((c.clone(), c))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaSettings {
    pub sigma0: f64,
    pub max_generations: usize,
    pub truncation: f64,
    /// Defaults to 4 + floor(3 ln n).
    pub population_size: Option<usize>,
    pub parallel: bool,
}

impl Default for CmaSettings {
    fn default() -> Self {
        Self { sigma0: 1.0, max_generations: 100, truncation: 0.3, population_size: None, parallel: false }
    }
}

impl CmaSettings {
    pub fn to_config(&self, dim: usize, seed: u64) -> CmaConfig {
        CmaConfig {
            dim,
            sigma0: self.sigma0,
            max_generations: self.max_generations,
            truncation: self.truncation,
            population_size: self.population_size.unwrap_or_else(|| default_population_size(dim)),
            seed,
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    pub target_per_batch: usize,
    pub expiry_minutes: i64,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self { target_per_batch: 10, expiry_minutes: 60, port: 8080, static_dir: None }
    }
}

/// Synthetic rater used by `simulate`. Similarity falls linearly with latent
/// distance; a participant calls a pair the same person when the perceived
/// distance is under their personal threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterModel {
    /// Latent distance at which similarity reaches 0. Defaults to
    /// sqrt(2 * dim), the typical distance between unrelated bases.
    pub zero_similarity_distance: Option<f64>,
    /// Identity threshold as a fraction of `zero_similarity_distance`.
    pub identity_threshold: f64,
    /// Spread of the per-participant threshold, same units.
    pub identity_threshold_sd: f64,
    /// Perception noise, same units.
    pub noise_sd: f64,
    /// Sessions rated at the same time.
    pub concurrency: usize,
}

impl Default for RaterModel {
    fn default() -> Self {
        Self {
            zero_similarity_distance: None,
            identity_threshold: 0.45,
            identity_threshold_sd: 0.15,
            noise_sd: 0.05,
            concurrency: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSettings {
    pub model: String,
    pub top_k: usize,
    /// Correlate individual ratings instead of per-pair means.
    pub per_rating: bool,
    /// Acceptance thresholds for models without a built-in default, or
    /// overriding one.
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self { model: "dlib".into(), top_k: 8, per_rating: false, thresholds: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub cma: CmaSettings,
    pub oracle: OracleEndpoint,
    /// Model the optimizer minimizes.
    pub decision_model: String,
    /// Models `score` queries.
    pub score_models: Vec<String>,
    pub study: StudySettings,
    pub rater: RaterModel,
    pub analysis: AnalysisSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            seed: 0,
            sampler: SamplerConfig::default(),
            cma: CmaSettings::default(),
            oracle: OracleEndpoint::default(),
            decision_model: "dlib".into(),
            score_models: vec!["dlib".into(), "vggface".into(), "facenet512".into(), "openface".into()],
            study: StudySettings::default(),
            rater: RaterModel::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("config {}: {message}", path.display())]
pub struct ConfigError {
    pub path: PathBuf,
    pub message: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |message: String| ConfigError { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sampler.validate().map_err(|e| e.to_string())?;
        self.cma.to_config(self.sampler.dim, 0).validate().map_err(|e| e.to_string())?;
        if self.study.target_per_batch == 0 {
            return Err("study.target_per_batch must be positive".into());
        }
        if self.rater.concurrency == 0 {
            return Err("rater.concurrency must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
