//! Latent-space vectors and the label-split random streams every sample is
//! drawn from.

use std::fmt;
use std::ops::Index;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Latent dimension of the generators this harness was built around.
pub const DEFAULT_DIM: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("latent vector must have at least one component")]
    Empty,
    #[error("latent component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("interpolation fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("{name} must be a positive finite number, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

/// A point in the generator's latent space. Components are always finite.
#[derive(Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(components: Vec<f64>) -> Result<Self, LatentError> {
        if components.is_empty() {
            return Err(LatentError::Empty);
        }
        if let Some((index, &value)) = components.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LatentError::NonFinite { index, value });
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "latent dimension must be positive");
        Self(vec![0.0; dim])
    }

    /// Unit vector along axis `axis`.
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[axis] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Little-endian f64 bytes of every component, used for content hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<(), LatentError> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(LatentError::DimensionMismatch { expected, actual: self.dim() })
        }
    }
}

impl fmt::Debug for LatentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 4;
        write!(f, "LatentVector[{}](", self.dim())?;
        for (i, x) in self.0.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.4}")?;
        }
        if self.dim() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, ")")
    }
}

impl Index<usize> for LatentVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl<'de> Deserialize<'de> for LatentVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(deserializer)?;
        LatentVector::new(raw).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<Vec<f64>> for LatentVector {
    type Error = LatentError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

/// A deterministic random stream identified by `(master_seed, stream_label)`.
///
/// The pair is hashed into a ChaCha20 key, so any stream can be recreated in
/// isolation and unrelated labels give unrelated streams.
pub struct SeededRng {
    master_seed: u64,
    label: String,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(master_seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(b"latentprobe-stream-v1");
        hasher.update(master_seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self { master_seed, label, inner: ChaCha20Rng::from_seed(key) }
    }

    /// A new stream whose label extends this one with `/suffix`.
    pub fn child(&self, suffix: &str) -> Self {
        Self::new(self.master_seed, format!("{}/{}", self.label, suffix))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// I.i.d. standard-normal latent of dimension `dim`.
pub fn random_latent(rng: &mut SeededRng, dim: usize) -> LatentVector {
    assert!(dim > 0, "latent dimension must be positive");
    LatentVector((0..dim).map(|_| rng.standard_normal()).collect())
}

/// Direction drawn uniformly from the unit sphere.
pub fn unit_direction(rng: &mut SeededRng, dim: usize) -> LatentVector {
    loop {
        let mut v = random_latent(rng, dim);
        let norm = v.norm();
        if norm > f64::MIN_POSITIVE {
            v.0.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// `base + distance * direction_scale * direction`.
pub fn step(
    base: &LatentVector,
    direction: &LatentVector,
    distance: f64,
    direction_scale: f64,
) -> Result<LatentVector, LatentError> {
    base.ensure_dim(direction.dim())?;
    if !(distance.is_finite() && distance > 0.0) {
        return Err(LatentError::NonPositive { name: "distance", value: distance });
    }
    if !(direction_scale.is_finite() && direction_scale > 0.0) {
        return Err(LatentError::NonPositive { name: "direction_scale", value: direction_scale });
    }
    let length = distance * direction_scale;
    LatentVector::new(base.0.iter().zip(&direction.0).map(|(b, d)| b + length * d).collect())
}

/// Componentwise `(1 - fraction) * base + fraction * target`.
pub fn lerp(base: &LatentVector, target: &LatentVector, fraction: f64) -> Result<LatentVector, LatentError> {
    base.ensure_dim(target.dim())?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(LatentError::FractionOutOfRange(fraction));
    }
    // The endpoints are returned as exact copies.
    if fraction == 0.0 {
        return Ok(base.clone());
    }
    if fraction == 1.0 {
        return Ok(target.clone());
    }
    LatentVector::new(base.0.iter().zip(&target.0).map(|(b, t)| b + fraction * (t - b)).collect())
}

pub fn euclidean_distance(a: &LatentVector, b: &LatentVector) -> Result<f64, LatentError> {
    a.ensure_dim(b.dim())?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}
