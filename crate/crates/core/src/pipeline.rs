//! Command-level steps over a dataset root: generate, score, serve,
//! simulate, analyze and export.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::export::{aggregates_csv, histograms_csv, violins_csv, AGGREGATES_FILE, HISTOGRAMS_FILE, VIOLINS_FILE};
use crate::analysis::{build_report, similarity_histograms, violin_points, Report, ReportOptions};
use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::dataset::{BatchStatus, Dataset, DatasetError, ScoreRecord, RATINGS_FILE, SCORES_FILE};
use crate::fsutil::{write_atomic, LockFile};
use crate::latent::{random_latent, SeededRng};
use crate::oracle::{DecisionOracle, GeneratorOracle, OracleError};
use crate::sampler::{materialize, plan_batch, run_optimized, OptimizeOptions, SamplerError};
use crate::simulate::{SimulateError, SimulateReport};
use crate::study::http::StudyServer;
use crate::study::{expired_participants, Study, StudyConfig, StudyError, SystemClock};

pub const LOCK_FILE: &str = ".latentprobe.lock";
/// Score rows for the Euclidean latent distance, computed without an oracle.
pub const LATENT_MODEL: &str = "latent";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch {batch_id}: {failures} images could not be generated; rerun to retry")]
    Materialize { batch_id: String, failures: usize },
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("{0}")]
    Missing(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Holds the dataset lock for the duration of a command.
pub fn lock_dataset(root: &Path) -> Result<LockFile, PipelineError> {
    std::fs::create_dir_all(root).map_err(|e| PipelineError::Io { path: root.to_path_buf(), source: e })?;
    let p = root.join(LOCK_FILE);
    LockFile::acquire(&p).map_err(|e| PipelineError::Io { path: p, source: e })
}

pub fn batch_id(index: usize) -> String {
    format!("b{index:03}")
}

pub fn save_run_config(config: &RunConfig) -> Result<(), PipelineError> {
    let path = config.dataset.join(RUN_CONFIG_FILE);
    let mut bytes = serde_json::to_vec_pretty(&config.to_json()).expect("config serializes");
    bytes.push(b'\n');
    write_atomic(&path, &bytes).map_err(|e| PipelineError::Io { path, source: e })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GenerateReport {
    pub batches_total: usize,
    pub batches_generated: usize,
    pub batches_skipped: usize,
    pub optimizer_runs: usize,
    pub evaluations: usize,
    pub generate_calls: u64,
    pub samples: usize,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Produces batches `0..n_batches`: plan, optimize, materialize, save. Each
/// stage is saved before the next starts, so an interrupted run resumes where
/// it stopped and finished batches are left untouched.
pub fn generate(config: &RunConfig, n_batches: usize) -> Result<GenerateReport, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let started = Instant::now();
    let root = config.dataset.clone();
    let _lock = lock_dataset(&root)?;
    let dim = config.sampler.dim;
    let mut dataset = Dataset::open_or_create(&root, dim, config.sampler.direction_scale, config.to_json())?;
    if dataset.manifest().direction_scale != config.sampler.direction_scale {
        return Err(PipelineError::Config(format!(
            "dataset was generated with direction_scale {}, config says {}",
            dataset.manifest().direction_scale,
            config.sampler.direction_scale
        )));
    }
    save_run_config(config)?;

    let (gen_backend, dist_backend) = config.oracle.connect(&root, dim)?;
    let gen = GeneratorOracle::new(dim, gen_backend);
    let dec = DecisionOracle::named(&config.decision_model, dist_backend);
    let mut report = GenerateReport { batches_total: n_batches, ..Default::default() };

    for i in 0..n_batches {
        let id = batch_id(i);
        let existing = dataset.manifest().entry(&id).map(|e| e.status);
        if existing == Some(BatchStatus::Complete) {
            report.batches_skipped += 1;
            report.samples += dataset.manifest().entry(&id).map_or(0, |e| e.sample_count);
            continue;
        }
        let mut batch = match existing {
            Some(_) => dataset.load_batch(&id)?,
            None => {
                let bases: Vec<_> = (0..config.sampler.bases_per_batch)
                    .map(|k| {
                        let mut rng = SeededRng::new(config.seed, format!("batch:{id}/base:{k}"));
                        (format!("{id}-{k}"), random_latent(&mut rng, dim))
                    })
                    .collect();
                let b = plan_batch(&id, &bases, config.seed, &config.sampler)?;
                dataset.save_batch(&b)?;
                b
            }
        };
        log::info!("batch {id}: optimizing");
        let cma = config.cma.to_config(dim, config.seed);
        let opt = run_optimized(&mut batch, &gen, &dec, &cma, OptimizeOptions { prune_root: Some(&root) });
        dataset.save_batch(&batch)?;
        let summary = opt?;
        report.optimizer_runs += summary.runs_executed;
        report.evaluations += summary.evaluations;

        log::info!("batch {id}: materializing");
        let m = materialize(&mut batch, &gen);
        dataset.save_batch(&batch)?;
        if m.failures > 0 {
            return Err(PipelineError::Materialize { batch_id: id, failures: m.failures });
        }
        report.batches_generated += 1;
        report.samples += batch.samples.len();
    }
    report.generate_calls = gen.calls();
    report.elapsed = started.elapsed();
    Ok(report)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ScoreReport {
    pub computed: usize,
    pub cached: usize,
    pub missing: usize,
    pub oracle_calls: u64,
}

/// Fills `scores.csv` with one distance per (pair, model) plus latent
/// distance rows. Existing rows are kept; a failed score is stored as missing
/// and only retried with `retry_missing`.
pub fn score(config: &RunConfig, models: &[String], retry_missing: bool) -> Result<ScoreReport, PipelineError> {
    let root = config.dataset.clone();
    let _lock = lock_dataset(&root)?;
    let dataset = Dataset::open(&root)?;
    let index = dataset.pair_index()?;
    let mut table = dataset.load_scores()?;
    let mut report = ScoreReport::default();

    let oracle_models: Vec<&String> = models.iter().filter(|m| m.as_str() != LATENT_MODEL).collect();
    let needs_oracle = index.pairs().iter().any(|p| {
        oracle_models.iter().any(|m| match table.get(&p.pair_id, m) {
            None => true,
            Some(None) => retry_missing,
            Some(Some(_)) => false,
        })
    });
    let backend = if needs_oracle { Some(config.oracle.connect(&root, dataset.manifest().dim)?.1) } else { None };

    for p in index.pairs() {
        if !table.contains(&p.pair_id, LATENT_MODEL) {
            table.insert(ScoreRecord { pair_id: p.pair_id.clone(), model_name: LATENT_MODEL.into(), distance: p.latent_distance });
            report.computed += 1;
        } else {
            report.cached += 1;
        }
    }
    for model in oracle_models {
        let dec = backend.as_ref().map(|b| DecisionOracle::named(model, b.clone()));
        for p in index.pairs() {
            match table.get(&p.pair_id, model) {
                Some(Some(_)) => {
                    report.cached += 1;
                    continue;
                }
                Some(None) if !retry_missing => {
                    report.cached += 1;
                    continue;
                }
                _ => {}
            }
            let dec = dec.as_ref().expect("oracle connected when a score is missing");
            let distance = match (&p.base_image, &p.sample_image) {
                (Some(a), Some(b)) => match dec.distance(a, b) {
                    Ok(d) => Some(d),
                    Err(e) => {
                        log::warn!("{model} on {}: {e}; recording {}", p.pair_id, crate::dataset::MISSING);
                        None
                    }
                },
                _ => None,
            };
            if distance.is_none() {
                report.missing += 1;
            } else {
                report.computed += 1;
            }
            table.insert(ScoreRecord { pair_id: p.pair_id.clone(), model_name: model.clone(), distance });
        }
        if let Some(d) = &dec {
            report.oracle_calls += d.wire_calls();
        }
    }
    dataset.save_scores(&table)?;
    Ok(report)
}

fn study_config(config: &RunConfig) -> StudyConfig {
    StudyConfig {
        target_per_batch: config.study.target_per_batch,
        expiry_minutes: config.study.expiry_minutes,
        seed: config.seed,
    }
}

fn open_study(config: &RunConfig) -> Result<(Dataset, Arc<Mutex<Study>>), PipelineError> {
    let dataset = Dataset::open(&config.dataset)?;
    let study = Study::open(&dataset, study_config(config), Arc::new(SystemClock))?;
    Ok((dataset, Arc::new(Mutex::new(study))))
}

/// Runs the study service until Ctrl-C. The dataset stays locked meanwhile.
pub fn serve(config: &RunConfig, addr: SocketAddr) -> Result<(), PipelineError> {
    let _lock = lock_dataset(&config.dataset)?;
    let (_, study) = open_study(config)?;
    let server = StudyServer::start(study, addr, config.study.static_dir.clone()).map_err(io_at(&config.dataset))?;
    log::info!("study service listening on {}", server.base_url());
    println!("listening on {}", server.base_url());
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(io_at(&config.dataset))?;
    rt.block_on(tokio::signal::ctrl_c()).map_err(io_at(&config.dataset))?;
    log::info!("shutting down");
    server.stop();
    Ok(())
}

/// Drives `participants` synthetic raters through the study API. Without
/// `url` an in-process service is started on a loopback port for the
/// duration of the run; with `url` the caller's running service is used.
pub fn simulate(config: &RunConfig, participants: usize, url: Option<&str>) -> Result<SimulateReport, PipelineError> {
    let run = |base: &str, dataset: &Dataset| -> Result<SimulateReport, PipelineError> {
        let pairs = dataset.pair_index()?;
        let dim = dataset.manifest().dim;
        Ok(crate::simulate::simulate(base, &pairs, &config.rater, dim, participants, config.seed)?)
    };
    if let Some(url) = url {
        return run(url, &Dataset::open(&config.dataset)?);
    }
    let _lock = lock_dataset(&config.dataset)?;
    let (dataset, study) = open_study(config)?;
    let server = StudyServer::start(study, SocketAddr::from(([127, 0, 0, 1], 0)), None).map_err(io_at(&config.dataset))?;
    let result = run(&server.base_url(), &dataset);
    server.stop();
    result
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutput {
    pub report: Report,
    pub files: Vec<PathBuf>,
}

/// Builds `report.json` at `out` and writes the distribution and per-pair
/// tables next to it. Participants of expired sessions are left out.
pub fn analyze(config: &RunConfig, out: &Path) -> Result<AnalyzeOutput, PipelineError> {
    let _lock = lock_dataset(&config.dataset)?;
    let dataset = Dataset::open(&config.dataset)?;
    if !dataset.scores_path().exists() {
        return Err(PipelineError::Missing(format!(
            "{} not found; run `latentprobe score` first or import a scores table",
            dataset.scores_path().display()
        )));
    }
    let ratings = if dataset.ratings_path().exists() { dataset.open_ratings()?.rows().to_vec() } else { Vec::new() };
    if ratings.is_empty() {
        return Err(PipelineError::Missing(format!(
            "no ratings in {}; collect some with `latentprobe serve` or `latentprobe simulate`",
            dataset.root().join(RATINGS_FILE).display()
        )));
    }
    let pairs = dataset.pair_index()?;
    let scores = dataset.load_scores()?;
    if scores.is_empty() {
        return Err(PipelineError::Missing(format!(
            "{} has no rows; run `latentprobe score`",
            dataset.root().join(SCORES_FILE).display()
        )));
    }
    let excluded = expired_participants(&dataset)?;
    let options = ReportOptions {
        model: config.analysis.model.clone(),
        top_k: config.analysis.top_k,
        per_rating: config.analysis.per_rating,
        thresholds: config.analysis.thresholds.clone(),
    };
    let (report, agg) = build_report(&pairs, &ratings, &scores, &excluded, &options);

    let kept: Vec<_> = ratings.iter().filter(|r| !excluded.contains(&r.participant_id)).cloned().collect();
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    let outputs = [
        (out.to_path_buf(), json),
        (dir.join(HISTOGRAMS_FILE), histograms_csv(&similarity_histograms(&pairs, &kept))),
        (dir.join(VIOLINS_FILE), violins_csv(&violin_points(&agg, &kept))),
        (dir.join(AGGREGATES_FILE), aggregates_csv(&agg.pairs, &agg.models)),
    ];
    let mut files = Vec::new();
    for (path, bytes) in outputs {
        write_atomic(&path, &bytes).map_err(io_at(&path))?;
        files.push(path);
    }
    Ok(AnalyzeOutput { report, files })
}

/// Canonical tables and the manifest copied into `out`.
pub fn export(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let _lock = lock_dataset(&config.dataset)?;
    Ok(Dataset::open(&config.dataset)?.export_all(out)?)
}

/// Small synthetic configuration that generates a batch in well under a
/// second.
#[cfg(test)]
pub(crate) fn tiny_config(root: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig { dataset: root.to_path_buf(), seed, ..RunConfig::default() };
    c.sampler.dim = 8;
    c.oracle = crate::config::OracleEndpoint::Synthetic { distance_normalizer: 4.0 };
    c.cma.sigma0 = 0.5;
    c.cma.max_generations = 300;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_resumable_and_score_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 11);
        let r = generate(&cfg, 1).unwrap();
        assert_eq!((r.batches_generated, r.samples), (1, 112));
        let again = generate(&cfg, 2).unwrap();
        assert_eq!((again.batches_skipped, again.batches_generated, again.samples), (1, 1, 224));
        assert!(dir.path().join(RUN_CONFIG_FILE).exists());
        assert!(!dir.path().join(LOCK_FILE).exists());

        let models = vec!["dlib".to_string(), "vggface".to_string()];
        let s = score(&cfg, &models, false).unwrap();
        assert_eq!(s.computed, 224 * 3);
        assert!(s.oracle_calls > 0);
        let s2 = score(&cfg, &models, false).unwrap();
        assert_eq!((s2.computed, s2.oracle_calls), (0, 0));

        let ds = Dataset::open(dir.path()).unwrap();
        let table = ds.load_scores().unwrap();
        for p in ds.pair_index().unwrap().pairs() {
            let d = table.get(&p.pair_id, "dlib").unwrap().unwrap();
            let l = table.get(&p.pair_id, LATENT_MODEL).unwrap().unwrap();
            assert!((d - l / 4.0).abs() <= 1e-12 * l.max(1.0), "{}: {d} vs {l}", p.pair_id);
        }
    }

    #[test]
    fn held_lock_refuses_a_second_command() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 1);
        let _held = lock_dataset(dir.path()).unwrap();
        assert!(matches!(generate(&cfg, 1), Err(PipelineError::Io { .. })));
    }

    #[test]
    fn analyze_explains_what_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 3);
        generate(&cfg, 1).unwrap();
        let out = dir.path().join("out/report.json");
        let e = analyze(&cfg, &out).unwrap_err().to_string();
        assert!(e.contains("scores.csv") && e.contains("latentprobe score"), "{e}");
        score(&cfg, &["dlib".to_string()], false).unwrap();
        let e = analyze(&cfg, &out).unwrap_err().to_string();
        assert!(e.contains("no ratings") && e.contains("simulate"), "{e}");
    }

    #[test]
    fn simulated_cohort_fills_a_batch_and_analysis_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), 5);
        cfg.rater.noise_sd = 0.0;
        generate(&cfg, 1).unwrap();
        score(&cfg, &["dlib".to_string()], false).unwrap();
        let sim = simulate(&cfg, 10, None).unwrap();
        assert_eq!((sim.sessions_completed, sim.ratings_submitted, sim.conflicts), (10, 1120, 0));
        let ds = Dataset::open(dir.path()).unwrap();
        let rows = ds.open_ratings().unwrap().rows().to_vec();
        assert_eq!(rows.len(), 1120);
        let mut per_pair = std::collections::BTreeMap::<&str, usize>::new();
        for r in &rows {
            *per_pair.entry(&r.pair_id).or_default() += 1;
        }
        assert_eq!(per_pair.len(), 112);
        assert!(per_pair.values().all(|&n| n == 10));
        assert!(matches!(simulate(&cfg, 1, None), Err(PipelineError::Simulate(SimulateError::StudyComplete))));

        let a = analyze(&cfg, &dir.path().join("a/report.json")).unwrap();
        let b = analyze(&cfg, &dir.path().join("b/report.json")).unwrap();
        assert_eq!(a.files.len(), 4);
        for (x, y) in a.files.iter().zip(&b.files) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
        let all = &a.report.correlations.rows[0];
        assert_eq!(all.subset, "all");
        let latent = &all.cells[LATENT_MODEL];
        assert!(latent.r.unwrap().abs() > 0.9, "{latent:?}");
    }
}
