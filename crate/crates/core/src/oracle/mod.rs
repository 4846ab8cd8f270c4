//! Access to the external generator and decision models.
//!
//! Models live behind the line protocol in [`protocol`] and are reached over a
//! child process or HTTP ([`client`]). [`synthetic::SyntheticWorld`] implements
//! the same backends in-process so the whole pipeline runs without any model.

pub mod client;
pub mod protocol;
pub mod server;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{LatentError, LatentVector};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle transport failed: {0}")]
    Transport(String),
    #[error("oracle returned error {code}: {message}")]
    Protocol { code: String, message: String },
    #[error("latent rejected before sending: {0}")]
    Precondition(#[from] LatentError),
    #[error("invalid image reference {0:?}")]
    BadImageRef(String),
    #[error("image store I/O failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("oracle returned a non-finite or negative distance {0}")]
    BadDistance(f64),
}

/// Path of an image relative to the dataset root.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageRef(String);

impl ImageRef {
    /// Accepts only plain relative paths that stay inside the root.
    pub fn new(path: impl Into<String>) -> Result<Self, OracleError> {
        let path = path.into();
        let p = Path::new(&path);
        let ok = !path.is_empty()
            && !path.contains('\\')
            && p.components().all(|c| matches!(c, Component::Normal(_)));
        if ok {
            Ok(Self(path))
        } else {
            Err(OracleError::BadImageRef(path))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn resolve(&self, root: &Path) -> PathBuf {
        root.join(&self.0)
    }
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageRef({})", self.0)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ImageRef {
    type Error = OracleError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<ImageRef> for String {
    fn from(r: ImageRef) -> String {
        r.0
    }
}

/// Something that turns latents into persisted images.
pub trait GeneratorBackend: Send + Sync {
    fn generate(&self, latent: &LatentVector) -> Result<ImageRef, OracleError>;
}

/// Something that scores image pairs for a named model.
pub trait DistanceBackend: Send + Sync {
    fn distance(&self, model: &str, a: &ImageRef, b: &ImageRef) -> Result<f64, OracleError>;
}

/// Default acceptance thresholds of the face-recognition models the harness
/// knows by name.
pub fn known_threshold(model: &str) -> Option<f64> {
    match model {
        "dlib" => Some(0.6),
        "vggface" | "vgg-face" => Some(0.86),
        "facenet512" => Some(1.04),
        "openface" => Some(0.55),
        _ => None,
    }
}

/// A model accepts a pair as the same identity when its distance is strictly
/// below the threshold.
pub fn accept(threshold: f64, distance: f64) -> bool {
    distance < threshold
}

pub struct GeneratorOracle {
    dim: usize,
    backend: Arc<dyn GeneratorBackend>,
    calls: AtomicU64,
}

impl GeneratorOracle {
    pub fn new(dim: usize, backend: Arc<dyn GeneratorBackend>) -> Self {
        Self { dim, backend, calls: AtomicU64::new(0) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generate(&self, latent: &LatentVector) -> Result<ImageRef, OracleError> {
        latent.ensure_dim(self.dim)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.backend.generate(latent)
    }

    /// Number of `generate` calls forwarded to the backend so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// A named decision model with its acceptance threshold and a memo of the
/// distances it has already reported.
pub struct DecisionOracle {
    model_name: String,
    default_threshold: Option<f64>,
    backend: Arc<dyn DistanceBackend>,
    cache: Mutex<HashMap<(ImageRef, ImageRef), f64>>,
    wire_calls: AtomicU64,
}

impl DecisionOracle {
    pub fn new(model_name: impl Into<String>, default_threshold: Option<f64>, backend: Arc<dyn DistanceBackend>) -> Self {
        Self {
            model_name: model_name.into(),
            default_threshold,
            backend,
            cache: Mutex::new(HashMap::new()),
            wire_calls: AtomicU64::new(0),
        }
    }

    /// Uses the model's well-known threshold when it has one.
    pub fn named(model_name: &str, backend: Arc<dyn DistanceBackend>) -> Self {
        Self::new(model_name, known_threshold(model_name), backend)
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn default_threshold(&self) -> Option<f64> {
        self.default_threshold
    }

    fn key(a: &ImageRef, b: &ImageRef) -> (ImageRef, ImageRef) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    /// Memoized distance; the key is unordered, so `(a, b)` and `(b, a)`
    /// share one entry. Failures are never cached.
    pub fn distance(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, OracleError> {
        if a == b {
            return Ok(0.0);
        }
        let key = Self::key(a, b);
        if let Some(d) = self.cache.lock().unwrap().get(&key) {
            return Ok(*d);
        }
        let d = self.distance_uncached(a, b)?;
        self.cache.lock().unwrap().insert(key, d);
        Ok(d)
    }

    /// Always goes to the backend. Used for optimizer candidates that are
    /// never queried twice.
    pub fn distance_uncached(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, OracleError> {
        if a == b {
            return Ok(0.0);
        }
        self.wire_calls.fetch_add(1, Ordering::Relaxed);
        let d = self.backend.distance(&self.model_name, a, b)?;
        if !d.is_finite() || d < 0.0 {
            return Err(OracleError::BadDistance(d));
        }
        Ok(d)
    }

    /// Seeds the memo with a distance obtained earlier (e.g. from scores.csv).
    pub fn prime(&self, a: &ImageRef, b: &ImageRef, d: f64) {
        self.cache.lock().unwrap().insert(Self::key(a, b), d);
    }

    /// `None` for metrics without a decision threshold (lpips, latent).
    pub fn accept(&self, d: f64) -> Option<bool> {
        self.default_threshold.map(|t| accept(t, d))
    }

    pub fn wire_calls(&self) -> u64 {
        self.wire_calls.load(Ordering::Relaxed)
    }
}
