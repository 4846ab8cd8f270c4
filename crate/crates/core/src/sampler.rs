//! Batch planning: four bases and the 28 probes derived from each.
//!
//! Per base the plan holds one genuine copy, positive steps along random
//! directions, the other bases as negatives, interpolations toward each
//! negative, and optimizer-found samples started from each negative.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmaes::{first_crossings, minimize, CmaConfig, CmaError, StopReason};
use crate::latent::{euclidean_distance, lerp, step, unit_direction, LatentError, LatentVector, SeededRng};
use crate::oracle::{DecisionOracle, GeneratorOracle, ImageRef, OracleError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("batch needs {expected} bases, got {actual}")]
    BaseCount { expected: usize, actual: usize },
    #[error("duplicate base id {0}")]
    DuplicateBaseId(String),
    #[error("bases {0} and {1} have identical latents")]
    DuplicateBaseLatent(String, String),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("oracle failed for {context}: {source}")]
    Oracle {
        context: String,
        #[source]
        source: OracleError,
    },
    #[error("optimizer run {run} failed: {source}")]
    Optimizer {
        run: String,
        #[source]
        source: CmaError,
    },
    #[error("{failed} of {total} optimizer runs failed; first error: {first}")]
    PartialOptimization { failed: usize, total: usize, first: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub dim: usize,
    /// Latent length of a unit positive step.
    pub direction_scale: f64,
    pub bases_per_batch: usize,
    pub directions_per_base: usize,
    pub positive_steps: Vec<f64>,
    pub interpolation_fractions: Vec<f64>,
    /// Strictly descending.
    pub optimized_thresholds: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            dim: crate::latent::DEFAULT_DIM,
            direction_scale: 1.0,
            bases_per_batch: 4,
            directions_per_base: 2,
            positive_steps: vec![0.2, 0.4, 0.6],
            interpolation_fractions: vec![0.25, 0.5, 0.75],
            optimized_thresholds: vec![0.5, 0.4, 0.3],
        }
    }
}

impl SamplerConfig {
    pub fn samples_per_base(&self) -> usize {
        let others = self.bases_per_batch - 1;
        1 + self.directions_per_base * self.positive_steps.len()
            + others
            + others * self.interpolation_fractions.len()
            + others * self.optimized_thresholds.len()
    }

    pub fn samples_per_batch(&self) -> usize {
        self.bases_per_batch * self.samples_per_base()
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.into()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.bases_per_batch < 2 {
            return bad("a batch needs at least two bases");
        }
        if !(self.direction_scale > 0.0 && self.direction_scale.is_finite()) {
            return bad("direction_scale must be positive");
        }
        if self.positive_steps.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("positive steps must be positive");
        }
        if self.interpolation_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("interpolation fractions must lie in [0, 1]");
        }
        if self.optimized_thresholds.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("optimized thresholds must be strictly descending");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SampleKind {
    Genuine,
    Positive { direction_index: usize, distance: f64 },
    Negative { source_base_id: String },
    Interpolation { negative_base_id: String, fraction: f64 },
    Optimized {
        start_negative_id: String,
        threshold: f64,
        /// Filled in once the optimizer run for this start has finished.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        result: Option<OptimizedResult>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedResult {
    pub reached: bool,
    pub achieved: f64,
    pub generation: usize,
}

/// Coarse sample category used for grouping in the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleType {
    Genuine,
    Interpolation,
    Negative,
    Optimized,
    Positive,
}

impl SampleType {
    pub const ALL: [SampleType; 5] =
        [SampleType::Genuine, SampleType::Interpolation, SampleType::Negative, SampleType::Optimized, SampleType::Positive];

    pub fn name(self) -> &'static str {
        match self {
            SampleType::Genuine => "genuine",
            SampleType::Interpolation => "interpolation",
            SampleType::Negative => "negative",
            SampleType::Optimized => "optimized",
            SampleType::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl SampleKind {
    pub fn sample_type(&self) -> SampleType {
        match self {
            SampleKind::Genuine => SampleType::Genuine,
            SampleKind::Positive { .. } => SampleType::Positive,
            SampleKind::Negative { .. } => SampleType::Negative,
            SampleKind::Interpolation { .. } => SampleType::Interpolation,
            SampleKind::Optimized { .. } => SampleType::Optimized,
        }
    }

    /// The sub-level parameter: step distance, fraction or threshold.
    pub fn level(&self) -> Option<f64> {
        match self {
            SampleKind::Positive { distance, .. } => Some(*distance),
            SampleKind::Interpolation { fraction, .. } => Some(*fraction),
            SampleKind::Optimized { threshold, .. } => Some(*threshold),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub base_id: String,
    pub latent: LatentVector,
    #[serde(default)]
    pub image: Option<ImageRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub batch_id: String,
    pub base_id: String,
    pub kind: SampleKind,
    /// `None` only for optimized slots that have not been filled yet.
    pub latent: Option<LatentVector>,
    pub image: Option<ImageRef>,
    pub latent_distance_to_base: Option<f64>,
    /// Set when generating this sample's image failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleRecord {
    pub fn pair_id(&self) -> String {
        pair_id(&self.base_id, &self.sample_id)
    }
}

/// `"<base_id>:<sample_id>"`, base shown left and sample right.
pub fn pair_id(base_id: &str, sample_id: &str) -> String {
    format!("{base_id}:{sample_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRun {
    pub base_id: String,
    pub start_negative_id: String,
    pub generations: usize,
    pub evaluations: usize,
    pub best_score: f64,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub master_seed: u64,
    pub bases: Vec<BaseRecord>,
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub optimizer_runs: Vec<OptimizerRun>,
}

impl Batch {
    pub fn base(&self, base_id: &str) -> Option<&BaseRecord> {
        self.bases.iter().find(|b| b.base_id == base_id)
    }

    pub fn base_ids(&self) -> Vec<String> {
        self.bases.iter().map(|b| b.base_id.clone()).collect()
    }

    pub fn is_optimized(&self) -> bool {
        self.samples.iter().all(|s| s.latent.is_some())
    }

    pub fn is_materialized(&self) -> bool {
        self.bases.iter().all(|b| b.image.is_some()) && self.samples.iter().all(|s| s.image.is_some())
    }

    pub fn kind_histogram(&self) -> HashMap<SampleType, usize> {
        let mut h = HashMap::new();
        for s in &self.samples {
            *h.entry(s.kind.sample_type()).or_insert(0) += 1;
        }
        h
    }
}

fn fmt_level(x: f64) -> String {
    format!("{x}")
}

/// Lays out every sample of a batch. All latents except the optimized ones
/// are computed here; it is a pure function of its inputs.
pub fn plan_batch(
    batch_id: &str,
    bases: &[(String, LatentVector)],
    master_seed: u64,
    config: &SamplerConfig,
) -> Result<Batch, SamplerError> {
    config.validate()?;
    if bases.len() != config.bases_per_batch {
        return Err(SamplerError::BaseCount { expected: config.bases_per_batch, actual: bases.len() });
    }
    let mut seen = HashSet::new();
    for (id, latent) in bases {
        latent.ensure_dim(config.dim)?;
        if !seen.insert(id.as_str()) {
            return Err(SamplerError::DuplicateBaseId(id.clone()));
        }
    }
    for (i, (a_id, a)) in bases.iter().enumerate() {
        for (b_id, b) in &bases[i + 1..] {
            if a == b {
                return Err(SamplerError::DuplicateBaseLatent(a_id.clone(), b_id.clone()));
            }
        }
    }

    let mut samples = Vec::with_capacity(config.samples_per_batch());
    for (base_id, base) in bases {
        let record = |sample_id: String, kind: SampleKind, latent: Option<LatentVector>| -> Result<SampleRecord, SamplerError> {
            let latent_distance_to_base = latent.as_ref().map(|l| euclidean_distance(l, base)).transpose()?;
            Ok(SampleRecord {
                sample_id,
                batch_id: batch_id.to_string(),
                base_id: base_id.clone(),
                kind,
                latent,
                image: None,
                latent_distance_to_base,
                error: None,
            })
        };

        samples.push(record(format!("{base_id}-gen"), SampleKind::Genuine, Some(base.clone()))?);

        for direction_index in 0..config.directions_per_base {
            let mut rng = SeededRng::new(master_seed, format!("batch:{batch_id}/base:{base_id}/dir:{direction_index}"));
            let direction = unit_direction(&mut rng, config.dim);
            for &distance in &config.positive_steps {
                let latent = step(base, &direction, distance, config.direction_scale)?;
                samples.push(record(
                    format!("{base_id}-pos{direction_index}-{}", fmt_level(distance)),
                    SampleKind::Positive { direction_index, distance },
                    Some(latent),
                )?);
            }
        }

        let others: Vec<&(String, LatentVector)> = bases.iter().filter(|(id, _)| id != base_id).collect();
        for (other_id, other) in &others {
            samples.push(record(
                format!("{base_id}-neg-{other_id}"),
                SampleKind::Negative { source_base_id: other_id.clone() },
                Some(other.clone()),
            )?);
        }
        for (other_id, other) in &others {
            for &fraction in &config.interpolation_fractions {
                samples.push(record(
                    format!("{base_id}-int-{other_id}-{}", fmt_level(fraction)),
                    SampleKind::Interpolation { negative_base_id: other_id.clone(), fraction },
                    Some(lerp(base, other, fraction)?),
                )?);
            }
        }
        for (other_id, _) in &others {
            for &threshold in &config.optimized_thresholds {
                samples.push(record(
                    format!("{base_id}-opt-{other_id}-{}", fmt_level(threshold)),
                    SampleKind::Optimized { start_negative_id: other_id.clone(), threshold, result: None },
                    None,
                )?);
            }
        }
    }

    Ok(Batch {
        batch_id: batch_id.to_string(),
        master_seed,
        bases: bases
            .iter()
            .map(|(id, l)| BaseRecord { base_id: id.clone(), latent: l.clone(), image: None })
            .collect(),
        samples,
        optimizer_runs: Vec::new(),
    })
}

/// Where candidate images written during optimization are cleaned up. When
/// set, every candidate image that did not end up in the batch is deleted
/// from below this root after its run.
#[derive(Debug, Clone, Copy, Default)]
pub struct OptimizeOptions<'a> {
    pub prune_root: Option<&'a Path>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct OptimizeSummary {
    pub runs_executed: usize,
    pub runs_skipped: usize,
    pub evaluations: usize,
}

struct RunOutcome {
    base_id: String,
    negative_id: String,
    crossings: Vec<(f64, LatentVector, Option<ImageRef>, OptimizedResult)>,
    summary: OptimizerRun,
}

fn run_seed(master_seed: u64, label: &str) -> u64 {
    SeededRng::new(master_seed, label).next_u64()
}

fn ensure_base_images(batch: &mut Batch, gen: &GeneratorOracle) -> Result<(), SamplerError> {
    for base in &mut batch.bases {
        if base.image.is_none() {
            let image = gen
                .generate(&base.latent)
                .map_err(|source| SamplerError::Oracle { context: format!("base {}", base.base_id), source })?;
            base.image = Some(image);
        }
    }
    Ok(())
}

/// Runs one optimizer per (base, negative start) pair whose optimized slots
/// are still empty, and fills those slots from the first threshold
/// crossings of its trajectory. Successful runs are written into `batch`
/// even when others fail, so the caller can persist partial progress.
pub fn run_optimized(
    batch: &mut Batch,
    gen: &GeneratorOracle,
    dec: &DecisionOracle,
    cma: &CmaConfig,
    options: OptimizeOptions<'_>,
) -> Result<OptimizeSummary, SamplerError> {
    ensure_base_images(batch, gen)?;

    // One run per (base, negative start); a partially filled run is redone.
    let mut groups: Vec<(String, String, Vec<f64>, bool)> = Vec::new();
    for s in &batch.samples {
        if let SampleKind::Optimized { start_negative_id, threshold, result } = &s.kind {
            let idx = match groups.iter().position(|g| g.0 == s.base_id && g.1 == *start_negative_id) {
                Some(i) => i,
                None => {
                    groups.push((s.base_id.clone(), start_negative_id.clone(), Vec::new(), true));
                    groups.len() - 1
                }
            };
            groups[idx].2.push(*threshold);
            groups[idx].3 &= result.is_some();
        }
    }
    let skipped = groups.iter().filter(|g| g.3).count();
    let pending: Vec<(String, String, Vec<f64>)> =
        groups.into_iter().filter(|g| !g.3).map(|(b, n, ts, _)| (b, n, ts)).collect();

    let keep: HashSet<ImageRef> = batch
        .bases
        .iter()
        .filter_map(|b| b.image.clone())
        .chain(batch.samples.iter().filter_map(|s| s.image.clone()))
        .collect();

    let batch_ref: &Batch = batch;
    let outcomes: Vec<Result<RunOutcome, SamplerError>> = pending
        .par_iter()
        .map(|(base_id, neg_id, thresholds)| {
            let label = format!("batch:{}/base:{base_id}/opt:{neg_id}", batch_ref.batch_id);
            let base = batch_ref.base(base_id).expect("planned base");
            let start = &batch_ref.base(neg_id).expect("planned negative").latent;
            let base_image = base.image.clone().expect("base images generated above");

            let mut thresholds = thresholds.clone();
            thresholds.sort_by(|a, b| b.total_cmp(a));
            let mut config = cma.clone();
            config.dim = start.dim();
            config.seed = run_seed(batch_ref.master_seed, &label);

            let generated: Mutex<HashMap<Vec<u8>, ImageRef>> = Mutex::new(HashMap::new());
            let objective = |candidate: &LatentVector| -> Result<f64, OracleError> {
                let image = gen.generate(candidate)?;
                generated.lock().unwrap().insert(candidate.to_le_bytes(), image.clone());
                dec.distance_uncached(&image, &base_image)
            };
            let traj = minimize(&config, objective, start).map_err(|source| SamplerError::Optimizer { run: label.clone(), source });
            let generated = generated.into_inner().unwrap();
            let traj = match traj {
                Ok(t) => t,
                Err(e) => {
                    prune(options.prune_root, generated.values(), &keep);
                    return Err(e);
                }
            };
            let crossings = first_crossings(&traj, &thresholds)
                .map_err(|source| SamplerError::Optimizer { run: label.clone(), source })?;

            let mut chosen = Vec::new();
            let mut kept_here = HashSet::new();
            for c in crossings {
                let image = generated.get(&c.candidate.to_le_bytes()).cloned();
                if let Some(img) = &image {
                    kept_here.insert(img.clone());
                }
                chosen.push((
                    c.threshold,
                    c.candidate,
                    image,
                    OptimizedResult { reached: c.reached, achieved: c.score, generation: c.generation },
                ));
            }
            prune(options.prune_root, generated.values().filter(|r| !kept_here.contains(*r)), &keep);

            let best = traj.best().expect("non-empty trajectory");
            Ok(RunOutcome {
                base_id: base_id.clone(),
                negative_id: neg_id.clone(),
                crossings: chosen,
                summary: OptimizerRun {
                    base_id: base_id.clone(),
                    start_negative_id: neg_id.clone(),
                    generations: traj.records.len(),
                    evaluations: traj.evaluations(),
                    best_score: best.best_score,
                    stop_reason: traj.stop_reason,
                },
            })
        })
        .collect();

    let total = outcomes.len();
    let mut summary = OptimizeSummary { runs_skipped: skipped, ..Default::default() };
    let mut errors = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(run) => {
                fill_run(batch, run, &mut summary)?;
            }
            Err(e) => errors.push(e),
        }
    }
    match errors.len() {
        0 => Ok(summary),
        1 if total == 1 => Err(errors.pop().unwrap()),
        failed => Err(SamplerError::PartialOptimization { failed, total, first: errors[0].to_string() }),
    }
}

fn fill_run(batch: &mut Batch, run: RunOutcome, summary: &mut OptimizeSummary) -> Result<(), SamplerError> {
    let base_latent = batch.base(&run.base_id).expect("planned base").latent.clone();
    for (threshold, candidate, image, result) in run.crossings {
        let slot = batch
            .samples
            .iter_mut()
            .find(|s| {
                s.base_id == run.base_id
                    && matches!(&s.kind, SampleKind::Optimized { start_negative_id, threshold: t, .. }
                        if *start_negative_id == run.negative_id && *t == threshold)
            })
            .expect("slot exists for every planned threshold");
        slot.latent_distance_to_base = Some(euclidean_distance(&candidate, &base_latent)?);
        slot.latent = Some(candidate);
        slot.image = image;
        if let SampleKind::Optimized { result: r, .. } = &mut slot.kind {
            *r = Some(result);
        }
    }
    summary.runs_executed += 1;
    summary.evaluations += run.summary.evaluations;
    batch
        .optimizer_runs
        .retain(|r| !(r.base_id == run.base_id && r.start_negative_id == run.negative_id));
    batch.optimizer_runs.push(run.summary);
    batch.optimizer_runs.sort_by(|a, b| (&a.base_id, &a.start_negative_id).cmp(&(&b.base_id, &b.start_negative_id)));
    Ok(())
}

fn prune<'a>(root: Option<&Path>, refs: impl Iterator<Item = &'a ImageRef>, keep: &HashSet<ImageRef>) {
    let Some(root) = root else { return };
    for r in refs.filter(|r| !keep.contains(*r)) {
        let _ = fs::remove_file(r.resolve(root));
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct MaterializeReport {
    pub generate_calls: usize,
    pub failures: usize,
}

/// Gives every base and sample an image. Identical latents share one image,
/// so genuine samples reuse their base's image and negatives the other
/// bases'. Samples that already have an image are left alone.
pub fn materialize(batch: &mut Batch, gen: &GeneratorOracle) -> MaterializeReport {
    let mut report = MaterializeReport::default();
    let mut by_latent: HashMap<Vec<u8>, ImageRef> = HashMap::new();
    for base in &batch.bases {
        if let Some(img) = &base.image {
            by_latent.insert(base.latent.to_le_bytes(), img.clone());
        }
    }
    for s in &batch.samples {
        if let (Some(l), Some(img)) = (&s.latent, &s.image) {
            by_latent.entry(l.to_le_bytes()).or_insert_with(|| img.clone());
        }
    }

    let mut resolve = |latent: &LatentVector, report: &mut MaterializeReport| -> Result<ImageRef, OracleError> {
        let key = latent.to_le_bytes();
        if let Some(img) = by_latent.get(&key) {
            return Ok(img.clone());
        }
        report.generate_calls += 1;
        let img = gen.generate(latent)?;
        by_latent.insert(key, img.clone());
        Ok(img)
    };

    for base in &mut batch.bases {
        if base.image.is_none() {
            match resolve(&base.latent, &mut report) {
                Ok(img) => base.image = Some(img),
                Err(e) => {
                    log::warn!("base {} failed to generate: {e}", base.base_id);
                    report.failures += 1;
                }
            }
        }
    }
    for s in &mut batch.samples {
        if s.image.is_some() {
            continue;
        }
        let Some(latent) = &s.latent else {
            s.error = Some("latent not yet optimized".into());
            report.failures += 1;
            continue;
        };
        match resolve(latent, &mut report) {
            Ok(img) => {
                s.image = Some(img);
                s.error = None;
            }
            Err(e) => {
                s.error = Some(e.to_string());
                report.failures += 1;
            }
        }
    }
    report
}
