//! An oracle-free stand-in for a generator plus decision models.
//!
//! The "image" of a latent is the latent itself, serialized losslessly, and
//! every model scores a pair as the scaled Euclidean distance of the
//! underlying latents.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::protocol::codes;
use super::{DistanceBackend, GeneratorBackend, ImageRef, OracleError};
use crate::fsutil::write_atomic;
use crate::latent::{euclidean_distance, LatentVector};

const MAGIC: &[u8; 8] = b"LPLATENT";

/// Default distance normalizer. Independent standard-normal bases in 512
/// dimensions sit about 32 apart, so unrelated identities score near 0.29.
/// An isotropic distance shrinks by only ~20% over 100 generations of the
/// default optimizer, and this keeps the 0.3 truncation reachable from every
/// negative start.
pub const DEFAULT_DISTANCE_NORMALIZER: f64 = 110.0;

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    dim: usize,
    distance_normalizer: f64,
    root: PathBuf,
}

impl SyntheticWorld {
    /// Images are written below `root/images`.
    pub fn new(root: impl Into<PathBuf>, dim: usize, distance_normalizer: f64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        assert!(distance_normalizer > 0.0 && distance_normalizer.is_finite(), "normalizer must be positive");
        Self { dim, distance_normalizer, root: root.into() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn distance_normalizer(&self) -> f64 {
        self.distance_normalizer
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn identity(&self) -> String {
        format!("synthetic-v1/dim={}", self.dim)
    }

    /// Content address of the image for `latent`.
    pub fn image_ref_for(&self, latent: &LatentVector) -> ImageRef {
        let mut h = Sha256::new();
        h.update(self.identity().as_bytes());
        h.update([0u8]);
        h.update(latent.to_le_bytes());
        ImageRef::new(format!("images/{}.lat", hex::encode(h.finalize()))).expect("hex path is a valid ref")
    }

    pub fn encode(latent: &LatentVector) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * latent.dim());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(latent.dim() as u32).to_le_bytes());
        out.extend_from_slice(&latent.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<LatentVector> {
        let body = bytes.strip_prefix(MAGIC.as_slice())?;
        let (dim, rest) = body.split_at_checked(4)?;
        let dim = u32::from_le_bytes(dim.try_into().ok()?) as usize;
        if rest.len() != dim * 8 {
            return None;
        }
        let comps = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        LatentVector::new(comps).ok()
    }

    pub fn load(&self, image: &ImageRef) -> Result<LatentVector, OracleError> {
        let path = image.resolve(&self.root);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => OracleError::Protocol {
                code: codes::NOT_FOUND.into(),
                message: format!("no image at {image}"),
            },
            _ => OracleError::Io { path: path.clone(), source: e },
        })?;
        Self::decode(&bytes).ok_or_else(|| OracleError::Protocol {
            code: codes::FAILED.into(),
            message: format!("{image} is not a synthetic latent image"),
        })
    }

    pub fn latent_distance(&self, a: &LatentVector, b: &LatentVector) -> Result<f64, OracleError> {
        Ok(euclidean_distance(a, b)? / self.distance_normalizer)
    }
}

impl GeneratorBackend for SyntheticWorld {
    fn generate(&self, latent: &LatentVector) -> Result<ImageRef, OracleError> {
        if latent.dim() != self.dim {
            return Err(OracleError::Protocol {
                code: codes::DIM_MISMATCH.into(),
                message: format!("expected {} components, got {}", self.dim, latent.dim()),
            });
        }
        let image = self.image_ref_for(latent);
        let path = image.resolve(&self.root);
        if !path.exists() {
            write_atomic(&path, &Self::encode(latent)).map_err(|e| OracleError::Io { path, source: e })?;
        }
        Ok(image)
    }
}

impl DistanceBackend for SyntheticWorld {
    fn distance(&self, _model: &str, a: &ImageRef, b: &ImageRef) -> Result<f64, OracleError> {
        let (a, b) = (self.load(a)?, self.load(b)?);
        self.latent_distance(&a, &b)
    }
}
