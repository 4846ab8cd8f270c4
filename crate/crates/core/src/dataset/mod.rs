//! On-disk dataset: manifest, batches with their latents, ratings and model
//! scores.
//!
//! ```text
//! <root>/manifest.json
//! <root>/batches/<batch_id>/batch.json
//! <root>/batches/<batch_id>/latents.bin        float32 LE, row-major
//! <root>/batches/<batch_id>/latents_f64.bin    float64 LE, same rows
//! <root>/batches/<batch_id>/latents.json       {dim, count, ids}
//! <root>/images/...
//! <root>/ratings.csv
//! <root>/scores.csv
//! ```

pub mod tables;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::latent::LatentVector;
use crate::oracle::ImageRef;
use crate::sampler::{Batch, BaseRecord, OptimizerRun, SampleKind, SampleRecord, SampleType};
pub use tables::{Rating, RatingLog, ScoreRecord, ScoreTable, MISSING, RATINGS_HEADER, SCORES_HEADER};

pub const FORMAT: &str = "latentprobe-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RATINGS_FILE: &str = "ratings.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const PAIRS_FILE: &str = "pairs.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}:{line}: {message}", file.display())]
    Malformed { file: PathBuf, line: u64, message: String },
    #[error("checksum mismatch in {}; the file is corrupt or was edited", file.display())]
    Checksum { file: PathBuf },
    #[error("batch {0:?} not found")]
    BatchNotFound(String),
    #[error("unknown pair {0:?}")]
    UnknownPair(String),
    #[error("participant {participant_id:?} already rated {pair_id:?}")]
    DuplicateRating { participant_id: String, pair_id: String },
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("no dataset at {} (missing manifest.json); run `generate` first", .0.display())]
    NoDataset(PathBuf),
    #[error("dataset at {} has dim {found}, expected {expected}", path.display())]
    DimMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    /// Optimized slots still empty.
    Planned,
    /// All latents known, some images missing.
    Optimized,
    Complete,
}

impl BatchStatus {
    pub fn of(batch: &Batch) -> Self {
        if batch.is_optimized() && batch.is_materialized() && batch.samples.iter().all(|s| s.error.is_none()) {
            Self::Complete
        } else if batch.is_optimized() {
            Self::Optimized
        } else {
            Self::Planned
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub batch_id: String,
    pub master_seed: u64,
    pub base_ids: Vec<String>,
    pub sample_count: usize,
    pub status: BatchStatus,
    /// SHA-256 of `batch.json`.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub batches: String,
    pub images: String,
    pub ratings: String,
    pub scores: String,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            batches: "batches/<batch_id>/{batch.json,latents.bin,latents_f64.bin,latents.json}".into(),
            images: "images/".into(),
            ratings: RATINGS_FILE.into(),
            scores: SCORES_FILE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub layout: Layout,
    pub dim: usize,
    pub direction_scale: f64,
    /// Whatever configuration produced the dataset.
    pub parameters: serde_json::Value,
    pub batches: Vec<BatchEntry>,
}

impl Manifest {
    pub fn new(dim: usize, direction_scale: f64, parameters: serde_json::Value) -> Self {
        Self { format: FORMAT.into(), layout: Layout::default(), dim, direction_scale, parameters, batches: Vec::new() }
    }

    pub fn entry(&self, batch_id: &str) -> Option<&BatchEntry> {
        self.batches.iter().find(|b| b.batch_id == batch_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentsIndex {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaseDoc {
    base_id: String,
    image: Option<ImageRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleDoc {
    sample_id: String,
    base_id: String,
    kind: SampleKind,
    image: Option<ImageRef>,
    latent_distance_to_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// `batch.json`: everything except the latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchDoc {
    batch_id: String,
    master_seed: u64,
    dim: usize,
    bases: Vec<BaseDoc>,
    samples: Vec<SampleDoc>,
    optimizer_runs: Vec<OptimizerRun>,
    /// File name to SHA-256 for the latent files next to this one.
    checksums: BTreeMap<String, String>,
}

/// One (base, sample) pair as shown to raters and scored by models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub pair_id: String,
    pub batch_id: String,
    pub base_id: String,
    pub sample_id: String,
    pub sample_type: SampleType,
    pub level: Option<f64>,
    pub kind: SampleKind,
    pub base_image: Option<ImageRef>,
    pub sample_image: Option<ImageRef>,
    pub latent_distance: Option<f64>,
}

impl PairInfo {
    pub fn of(batch: &Batch, sample: &SampleRecord) -> Self {
        Self {
            pair_id: sample.pair_id(),
            batch_id: batch.batch_id.clone(),
            base_id: sample.base_id.clone(),
            sample_id: sample.sample_id.clone(),
            sample_type: sample.kind.sample_type(),
            level: sample.kind.level(),
            kind: sample.kind.clone(),
            base_image: batch.base(&sample.base_id).and_then(|b| b.image.clone()),
            sample_image: sample.image.clone(),
            latent_distance: sample.latent_distance_to_base,
        }
    }
}

/// All pairs of a dataset, in manifest then sample order.
#[derive(Debug, Clone, Default)]
pub struct PairIndex {
    pairs: Vec<PairInfo>,
    by_id: HashMap<String, usize>,
}

impl PairIndex {
    pub fn from_batches<'a>(batches: impl IntoIterator<Item = &'a Batch>) -> Result<Self, DatasetError> {
        Self::from_pairs(batches.into_iter().flat_map(|b| b.samples.iter().map(move |s| PairInfo::of(b, s))).collect())
    }

    pub fn from_pairs(pairs: Vec<PairInfo>) -> Result<Self, DatasetError> {
        let mut index = Self::default();
        for info in pairs {
            if index.by_id.insert(info.pair_id.clone(), index.pairs.len()).is_some() {
                return Err(DatasetError::Inconsistent(format!("pair {} appears twice", info.pair_id)));
            }
            index.pairs.push(info);
        }
        Ok(index)
    }

    pub fn get(&self, pair_id: &str) -> Option<&PairInfo> {
        self.by_id.get(pair_id).map(|&i| &self.pairs[i])
    }

    pub fn pairs(&self) -> &[PairInfo] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> HashSet<String> {
        self.by_id.keys().cloned().collect()
    }

    pub fn for_batch(&self, batch_id: &str) -> Vec<&PairInfo> {
        self.pairs.iter().filter(|p| p.batch_id == batch_id).collect()
    }

    /// Checks range and that the pair exists and matches its ids.
    pub fn validate_rating(&self, r: &Rating) -> Result<(), DatasetError> {
        if r.similarity > 100 {
            return Err(DatasetError::InvalidRating(format!("similarity {} outside 0..=100", r.similarity)));
        }
        if r.participant_id.is_empty() {
            return Err(DatasetError::InvalidRating("empty participant_id".into()));
        }
        let p = self.get(&r.pair_id).ok_or_else(|| DatasetError::UnknownPair(r.pair_id.clone()))?;
        if p.base_id != r.base_id || p.sample_id != r.sample_id {
            return Err(DatasetError::InvalidRating(format!(
                "pair {} is ({}, {}), not ({}, {})",
                r.pair_id, p.base_id, p.sample_id, r.base_id, r.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Opens an existing dataset or starts a new one. An existing dataset
    /// must agree on `dim`.
    pub fn open_or_create(
        root: &Path,
        dim: usize,
        direction_scale: f64,
        parameters: serde_json::Value,
    ) -> Result<Self, DatasetError> {
        if root.join(MANIFEST_FILE).exists() {
            let ds = Self::open(root)?;
            if ds.manifest.dim != dim {
                return Err(DatasetError::DimMismatch { path: root.to_path_buf(), expected: dim, found: ds.manifest.dim });
            }
            return Ok(ds);
        }
        fs::create_dir_all(root).map_err(io_at(root))?;
        let ds = Self { root: root.to_path_buf(), manifest: Manifest::new(dim, direction_scale, parameters) };
        ds.save_manifest()?;
        Ok(ds)
    }

    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(MANIFEST_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(DatasetError::NoDataset(root.to_path_buf())),
            Err(e) => return Err(DatasetError::Io { path, source: e }),
        };
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Json { path: path.clone(), source: e })?;
        if manifest.format != FORMAT {
            return Err(DatasetError::Inconsistent(format!("unsupported dataset format {:?}", manifest.format)));
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ratings_path(&self) -> PathBuf {
        self.root.join(RATINGS_FILE)
    }

    pub fn scores_path(&self) -> PathBuf {
        self.root.join(SCORES_FILE)
    }

    pub fn batch_dir(&self, batch_id: &str) -> PathBuf {
        self.root.join("batches").join(batch_id)
    }

    pub fn save_manifest(&self) -> Result<(), DatasetError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(io_at(&path))
    }

    /// Writes the batch files, then records the batch in the manifest.
    pub fn save_batch(&mut self, batch: &Batch) -> Result<(), DatasetError> {
        let dim = self.manifest.dim;
        let mut ids = Vec::new();
        let mut rows: Vec<&LatentVector> = Vec::new();
        for b in &batch.bases {
            ids.push(b.base_id.clone());
            rows.push(&b.latent);
        }
        for s in &batch.samples {
            if let Some(l) = &s.latent {
                ids.push(s.sample_id.clone());
                rows.push(l);
            }
        }
        if let Some(bad) = rows.iter().find(|l| l.dim() != dim) {
            return Err(DatasetError::DimMismatch { path: self.batch_dir(&batch.batch_id), expected: dim, found: bad.dim() });
        }
        let mut f32_bytes = Vec::with_capacity(rows.len() * dim * 4);
        let mut f64_bytes = Vec::with_capacity(rows.len() * dim * 8);
        for l in &rows {
            for &x in l.as_slice() {
                f32_bytes.extend_from_slice(&(x as f32).to_le_bytes());
                f64_bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let index = LatentsIndex { dim, count: rows.len(), ids };
        let mut index_bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        index_bytes.push(b'\n');

        let files: [(&str, &[u8]); 3] =
            [("latents.bin", &f32_bytes), ("latents_f64.bin", &f64_bytes), ("latents.json", &index_bytes)];
        let doc = BatchDoc {
            batch_id: batch.batch_id.clone(),
            master_seed: batch.master_seed,
            dim,
            bases: batch.bases.iter().map(|b| BaseDoc { base_id: b.base_id.clone(), image: b.image.clone() }).collect(),
            samples: batch
                .samples
                .iter()
                .map(|s| SampleDoc {
                    sample_id: s.sample_id.clone(),
                    base_id: s.base_id.clone(),
                    kind: s.kind.clone(),
                    image: s.image.clone(),
                    latent_distance_to_base: s.latent_distance_to_base,
                    error: s.error.clone(),
                })
                .collect(),
            optimizer_runs: batch.optimizer_runs.clone(),
            checksums: files.iter().map(|(n, b)| (n.to_string(), sha256_hex(b))).collect(),
        };
        let mut doc_bytes = serde_json::to_vec_pretty(&doc).expect("batch serializes");
        doc_bytes.push(b'\n');

        let dir = self.batch_dir(&batch.batch_id);
        for (name, bytes) in files {
            let p = dir.join(name);
            write_atomic(&p, bytes).map_err(io_at(&p))?;
        }
        let p = dir.join("batch.json");
        write_atomic(&p, &doc_bytes).map_err(io_at(&p))?;

        let entry = BatchEntry {
            batch_id: batch.batch_id.clone(),
            master_seed: batch.master_seed,
            base_ids: batch.base_ids(),
            sample_count: batch.samples.len(),
            status: BatchStatus::of(batch),
            sha256: sha256_hex(&doc_bytes),
        };
        match self.manifest.batches.iter_mut().find(|e| e.batch_id == batch.batch_id) {
            Some(e) => *e = entry,
            None => self.manifest.batches.push(entry),
        }
        self.save_manifest()
    }

    fn read_checked(&self, path: &Path, expected: &str) -> Result<Vec<u8>, DatasetError> {
        let bytes = fs::read(path).map_err(io_at(path))?;
        if sha256_hex(&bytes) != expected {
            return Err(DatasetError::Checksum { file: path.to_path_buf() });
        }
        Ok(bytes)
    }

    pub fn load_batch(&self, batch_id: &str) -> Result<Batch, DatasetError> {
        let entry = self.manifest.entry(batch_id).ok_or_else(|| DatasetError::BatchNotFound(batch_id.to_string()))?;
        let dir = self.batch_dir(batch_id);
        let doc_path = dir.join("batch.json");
        let doc_bytes = self.read_checked(&doc_path, &entry.sha256)?;
        let doc: BatchDoc = serde_json::from_slice(&doc_bytes).map_err(|e| DatasetError::Json { path: doc_path, source: e })?;
        let checksum = |name: &str| {
            doc.checksums.get(name).cloned().ok_or_else(|| DatasetError::Inconsistent(format!("batch.json lacks a checksum for {name}")))
        };

        let index_path = dir.join("latents.json");
        let index_bytes = self.read_checked(&index_path, &checksum("latents.json")?)?;
        let index: LatentsIndex =
            serde_json::from_slice(&index_bytes).map_err(|e| DatasetError::Json { path: index_path.clone(), source: e })?;
        if index.dim != doc.dim || index.ids.len() != index.count {
            return Err(DatasetError::Inconsistent(format!("{} disagrees with batch.json", index_path.display())));
        }
        let f64_path = dir.join("latents_f64.bin");
        let f32_path = dir.join("latents.bin");
        let f32_bytes = self.read_checked(&f32_path, &checksum("latents.bin")?)?;
        if f32_bytes.len() != index.count * index.dim * 4 {
            return Err(DatasetError::Inconsistent(format!("{} has the wrong size", f32_path.display())));
        }
        let components: Vec<f64> = if f64_path.exists() {
            let bytes = self.read_checked(&f64_path, &checksum("latents_f64.bin")?)?;
            if bytes.len() != index.count * index.dim * 8 {
                return Err(DatasetError::Inconsistent(format!("{} has the wrong size", f64_path.display())));
            }
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            f32_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        let mut latents: HashMap<&str, LatentVector> = HashMap::new();
        for (i, id) in index.ids.iter().enumerate() {
            let row = components[i * index.dim..(i + 1) * index.dim].to_vec();
            let v = LatentVector::new(row).map_err(|e| DatasetError::Inconsistent(format!("latent {id}: {e}")))?;
            latents.insert(id, v);
        }

        let bases = doc
            .bases
            .into_iter()
            .map(|b| {
                let latent = latents
                    .get(b.base_id.as_str())
                    .cloned()
                    .ok_or_else(|| DatasetError::Inconsistent(format!("no latent for base {}", b.base_id)))?;
                Ok(BaseRecord { base_id: b.base_id, latent, image: b.image })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let samples = doc
            .samples
            .into_iter()
            .map(|s| SampleRecord {
                latent: latents.get(s.sample_id.as_str()).cloned(),
                sample_id: s.sample_id,
                batch_id: doc.batch_id.clone(),
                base_id: s.base_id,
                kind: s.kind,
                image: s.image,
                latent_distance_to_base: s.latent_distance_to_base,
                error: s.error,
            })
            .collect();
        Ok(Batch { batch_id: doc.batch_id, master_seed: doc.master_seed, bases, samples, optimizer_runs: doc.optimizer_runs })
    }

    pub fn batch_ids(&self) -> Vec<String> {
        self.manifest.batches.iter().map(|b| b.batch_id.clone()).collect()
    }

    pub fn load_all(&self) -> Result<Vec<Batch>, DatasetError> {
        self.manifest.batches.iter().map(|e| self.load_batch(&e.batch_id)).collect()
    }

    pub fn pair_index(&self) -> Result<PairIndex, DatasetError> {
        PairIndex::from_batches(&self.load_all()?)
    }

    pub fn open_ratings(&self) -> Result<RatingLog, DatasetError> {
        RatingLog::open(&self.ratings_path())
    }

    pub fn load_scores(&self) -> Result<ScoreTable, DatasetError> {
        let path = self.scores_path();
        if !path.exists() {
            return Ok(ScoreTable::default());
        }
        ScoreTable::load(&path)
    }

    pub fn save_scores(&self, table: &ScoreTable) -> Result<(), DatasetError> {
        let path = self.scores_path();
        write_atomic(&path, &table.encode()).map_err(io_at(&path))
    }

    /// Merges an external scores table into `scores.csv`. Either every row is
    /// accepted or nothing is written. Returns the number of rows read.
    pub fn import_scores(&self, bytes: &[u8], source: &Path) -> Result<usize, DatasetError> {
        let pairs = self.pair_index()?.ids();
        let records = ScoreTable::parse(bytes, source, Some(&pairs))?;
        let mut table = self.load_scores()?;
        let n = records.len();
        for r in records {
            table.insert(r);
        }
        self.save_scores(&table)?;
        Ok(n)
    }

    /// Writes canonical `ratings.csv`, `scores.csv`, `pairs.csv` and a copy
    /// of the manifest into `out`.
    pub fn export_all(&self, out: &Path) -> Result<Vec<PathBuf>, DatasetError> {
        fs::create_dir_all(out).map_err(io_at(out))?;
        let index = self.pair_index()?;
        let ratings = if self.ratings_path().exists() { self.open_ratings()?.rows().to_vec() } else { Vec::new() };
        for r in &ratings {
            index.validate_rating(r)?;
        }
        let scores = self.load_scores()?;
        if let Some(r) = scores.iter().find(|r| index.get(&r.pair_id).is_none()) {
            return Err(DatasetError::UnknownPair(r.pair_id));
        }
        let manifest_bytes = fs::read(self.root.join(MANIFEST_FILE)).map_err(io_at(&self.root))?;
        let outputs = [
            (RATINGS_FILE, tables::encode_ratings(&ratings)),
            (SCORES_FILE, scores.encode()),
            (PAIRS_FILE, encode_pairs(&index)),
            (MANIFEST_FILE, manifest_bytes),
        ];
        let mut written = Vec::new();
        for (name, bytes) in outputs {
            let p = out.join(name);
            write_atomic(&p, &bytes).map_err(io_at(&p))?;
            written.push(p);
        }
        Ok(written)
    }
}

fn encode_pairs(index: &PairIndex) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "pair_id",
        "batch_id",
        "base_id",
        "sample_id",
        "sample_type",
        "level",
        "latent_distance",
        "base_image",
        "sample_image",
    ])
    .unwrap();
    let opt = |x: Option<f64>| x.map_or_else(|| MISSING.to_string(), |v| format!("{v}"));
    for p in index.pairs() {
        w.write_record([
            p.pair_id.clone(),
            p.batch_id.clone(),
            p.base_id.clone(),
            p.sample_id.clone(),
            p.sample_type.name().to_string(),
            opt(p.level),
            opt(p.latent_distance),
            p.base_image.as_ref().map_or(String::new(), |i| i.to_string()),
            p.sample_image.as_ref().map_or(String::new(), |i| i.to_string()),
        ])
        .unwrap();
    }
    w.into_inner().unwrap()
}

/// Convenience for callers holding a pair id only.
pub fn split_pair_id(pair: &str) -> Option<(&str, &str)> {
    pair.split_once(':')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{random_latent, SeededRng};
    use crate::sampler::{plan_batch, SamplerConfig};

    fn planned(dim: usize, seed: u64) -> Batch {
        let cfg = SamplerConfig { dim, ..SamplerConfig::default() };
        let mut rng = SeededRng::new(seed, "bases");
        let bases: Vec<(String, LatentVector)> = (0..4).map(|i| (format!("b000-{i}"), random_latent(&mut rng, dim))).collect();
        plan_batch("b000", &bases, seed, &cfg).unwrap()
    }

    fn fresh(dir: &Path, dim: usize) -> Dataset {
        Dataset::open_or_create(dir, dim, 1.0, serde_json::json!({"seed": 1})).unwrap()
    }

    #[test]
    fn planned_batch_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fresh(dir.path(), 16);
        let batch = planned(16, 3);
        ds.save_batch(&batch).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let back = ds.load_batch("b000").unwrap();
        assert_eq!(back, batch);
        for (a, b) in back.bases.iter().zip(&batch.bases) {
            assert!(a.latent.as_slice().iter().zip(b.latent.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(ds.manifest().entry("b000").unwrap().status, BatchStatus::Planned);
    }

    #[test]
    fn latents_file_is_float32_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fresh(dir.path(), 16);
        let batch = planned(16, 4);
        ds.save_batch(&batch).unwrap();
        let index: LatentsIndex =
            serde_json::from_slice(&fs::read(ds.batch_dir("b000").join("latents.json")).unwrap()).unwrap();
        // 4 bases plus 76 planned samples with latents; optimized slots are empty.
        assert_eq!(index.count, 4 + 112 - 36);
        let len = fs::metadata(ds.batch_dir("b000").join("latents.bin")).unwrap().len();
        assert_eq!(len as usize, index.count * 16 * 4);
        let first = f32::from_le_bytes(fs::read(ds.batch_dir("b000").join("latents.bin")).unwrap()[..4].try_into().unwrap());
        assert_eq!(first, batch.bases[0].latent[0] as f32);
    }

    #[test]
    fn corrupt_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fresh(dir.path(), 8);
        ds.save_batch(&planned(8, 5)).unwrap();
        for name in ["latents.bin", "latents_f64.bin", "latents.json", "batch.json"] {
            let p = ds.batch_dir("b000").join(name);
            let original = fs::read(&p).unwrap();
            let mut bytes = original.clone();
            let mid = bytes.len() / 2;
            bytes[mid] ^= 0x01;
            fs::write(&p, &bytes).unwrap();
            match ds.load_batch("b000") {
                Err(DatasetError::Checksum { file }) => assert_eq!(file, p),
                other => panic!("{name}: {other:?}"),
            }
            fs::write(&p, &original).unwrap();
        }
        ds.load_batch("b000").unwrap();
    }

    #[test]
    fn unknown_batch_and_missing_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(DatasetError::NoDataset(_))));
        let ds = fresh(dir.path(), 8);
        assert!(matches!(ds.load_batch("nope"), Err(DatasetError::BatchNotFound(_))));
        assert!(matches!(
            Dataset::open_or_create(dir.path(), 9, 1.0, serde_json::Value::Null),
            Err(DatasetError::DimMismatch { .. })
        ));
    }

    #[test]
    fn manifest_keys_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::open_or_create(dir.path(), 8, 1.0, serde_json::json!({"z": 1, "a": 2})).unwrap();
        ds.save_batch(&planned(8, 6)).unwrap();
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"z\"").unwrap());
        ds.save_batch(&planned(8, 6)).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first);
    }

    #[test]
    fn ratings_are_validated_against_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fresh(dir.path(), 8);
        let batch = planned(8, 7);
        ds.save_batch(&batch).unwrap();
        let index = ds.pair_index().unwrap();
        assert_eq!(index.len(), 112);
        let s = &batch.samples[0];
        let mut r = Rating {
            participant_id: "p".into(),
            pair_id: s.pair_id(),
            base_id: s.base_id.clone(),
            sample_id: s.sample_id.clone(),
            similarity: 101,
            same_person: true,
            order_index: 0,
            timestamp: String::new(),
        };
        assert!(matches!(index.validate_rating(&r), Err(DatasetError::InvalidRating(_))));
        r.similarity = 100;
        index.validate_rating(&r).unwrap();
        r.pair_id = "b000-0:nothing".into();
        assert!(matches!(index.validate_rating(&r), Err(DatasetError::UnknownPair(_))));
    }

    #[test]
    fn import_is_atomic_and_export_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fresh(dir.path(), 8);
        let batch = planned(8, 8);
        ds.save_batch(&batch).unwrap();
        let (p0, p1) = (batch.samples[0].pair_id(), batch.samples[1].pair_id());
        let good = format!("pair_id,model_name,distance\n{p1},dlib,0.5\n{p0},dlib,NA\n{p0},vggface,0.25\n");
        assert_eq!(ds.import_scores(good.as_bytes(), Path::new("in.csv")).unwrap(), 3);
        let before = fs::read(ds.scores_path()).unwrap();
        let bad = format!("pair_id,model_name,distance\n{p0},facenet,0.1\n{p1},facenet,-1\n");
        match ds.import_scores(bad.as_bytes(), Path::new("in.csv")) {
            Err(DatasetError::Malformed { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(fs::read(ds.scores_path()).unwrap(), before);
        ds.import_scores(good.as_bytes(), Path::new("in.csv")).unwrap();
        assert_eq!(fs::read(ds.scores_path()).unwrap(), before);

        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        ds.export_all(&out1).unwrap();
        let exported = fs::read(out1.join(SCORES_FILE)).unwrap();
        ds.import_scores(&exported, &out1.join(SCORES_FILE)).unwrap();
        ds.export_all(&out2).unwrap();
        for f in [RATINGS_FILE, SCORES_FILE, PAIRS_FILE] {
            assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
        }
        assert!(String::from_utf8(exported).unwrap().contains(",dlib,NA\n"));
    }
}
