//! (μ/μ_w, λ) CMA-ES with cumulative step-size adaptation, rank-one and
//! rank-μ covariance updates, and lazy eigendecomposition.
//!
//! The loop records the best candidate of every generation so callers can
//! pick the first generation that crossed any of several score thresholds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{LatentVector, SeededRng};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum CmaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("start point has dimension {actual}, configuration expects {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("objective returned {value} for candidate {index} of generation {generation}: {candidate:?}")]
    NonFinite { generation: usize, index: usize, value: f64, candidate: LatentVector },
    #[error("objective failed on candidate {index} of generation {generation}: {source}")]
    Objective {
        generation: usize,
        index: usize,
        #[source]
        source: BoxError,
    },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("thresholds must be non-empty and strictly descending, got {0:?}")]
    Thresholds(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaConfig {
    pub dim: usize,
    pub sigma0: f64,
    pub max_generations: usize,
    /// Stop as soon as a generation's best score falls below this value.
    pub truncation: f64,
    pub population_size: usize,
    pub seed: u64,
    /// Evaluate a generation's candidates on the rayon pool. Results are
    /// consumed in candidate order either way.
    #[serde(default)]
    pub parallel: bool,
}

impl CmaConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            sigma0: 1.0,
            max_generations: 100,
            truncation: 0.3,
            population_size: default_population_size(dim),
            seed,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<(), CmaError> {
        let bad = |m: &str| Err(CmaError::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.population_size < 4 {
            return bad("population_size must be at least 4");
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be positive");
        }
        if !(self.truncation > 0.0) {
            return bad("truncation must be positive");
        }
        if self.max_generations == 0 {
            return bad("max_generations must be positive");
        }
        Ok(())
    }
}

/// `4 + floor(3 ln n)`.
pub fn default_population_size(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Strategy constants derived from dimension and population size.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
    pub eigen_interval: f64,
}

impl Parameters {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        let eigen_interval = lambda as f64 / (c_1 + c_mu) / n / 10.0;
        Self { lambda, mu, weights, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n, eigen_interval }
    }
}

/// Distribution state between generations.
#[derive(Debug, Clone)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub covariance: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub generation: usize,
    /// Eigenvectors of the covariance, as columns.
    basis: DMatrix<f64>,
    /// Square roots of the covariance eigenvalues.
    scales: DVector<f64>,
    /// `basis * diag(scales)`, the map from isotropic samples to steps.
    transform: DMatrix<f64>,
    eigen_generation: usize,
}

impl CmaState {
    fn new(start: &LatentVector, sigma: f64) -> Self {
        let n = start.dim();
        Self {
            mean: DVector::from_column_slice(start.as_slice()),
            sigma,
            covariance: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            transform: DMatrix::identity(n, n),
            eigen_generation: 0,
        }
    }

    /// Eigenvalues of the covariance as of the last decomposition.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.scales.iter().map(|d| d * d).collect()
    }

    fn decompose(&mut self) {
        let n = self.covariance.nrows();
        // Enforce exact symmetry before decomposing.
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (self.covariance[(i, j)] + self.covariance[(j, i)]);
                self.covariance[(i, j)] = avg;
                self.covariance[(j, i)] = avg;
            }
        }
        let eig = SymmetricEigen::new(self.covariance.clone());
        let max = eig.eigenvalues.max();
        let floor = (max * 1e-20).max(f64::MIN_POSITIVE);
        if eig.eigenvalues.min() < floor {
            log::warn!("covariance eigenvalue {} below floor, clamping", eig.eigenvalues.min());
        }
        self.scales = eig.eigenvalues.map(|v| v.max(floor).sqrt());
        self.basis = eig.eigenvectors;
        self.transform = &self.basis * DMatrix::from_diagonal(&self.scales);
        self.eigen_generation = self.generation;
    }

    /// `C^{-1/2} y`.
    fn whiten(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut coords = self.basis.tr_mul(y);
        coords.component_div_assign(&self.scales);
        &self.basis * coords
    }

    pub fn mean_latent(&self) -> LatentVector {
        LatentVector::new(self.mean.as_slice().to_vec()).expect("mean stays finite")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// 1-based generation number.
    pub generation: usize,
    pub best_candidate: LatentVector,
    pub best_score: f64,
    /// Objective evaluations used up to and including this generation.
    pub evaluations_used: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Truncation,
    MaxGenerations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<GenerationRecord>,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn best(&self) -> Option<&GenerationRecord> {
        // min_by keeps the first of equal elements only when reversed, so
        // fold explicitly to prefer the earliest generation on ties.
        self.records.iter().fold(None, |acc: Option<&GenerationRecord>, r| match acc {
            Some(b) if b.best_score <= r.best_score => Some(b),
            _ => Some(r),
        })
    }

    pub fn evaluations(&self) -> usize {
        self.records.last().map_or(0, |r| r.evaluations_used)
    }

    /// Running minimum of the per-generation best scores.
    pub fn running_best(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.best_score);
                best
            })
            .collect()
    }
}

/// One generation-stepping optimizer. [`minimize`] drives it to completion;
/// tests use it directly to inspect the state between generations.
pub struct Optimizer {
    config: CmaConfig,
    params: Parameters,
    state: CmaState,
    rng: SeededRng,
    evaluations: usize,
}

impl Optimizer {
    pub fn new(config: CmaConfig, start: &LatentVector) -> Result<Self, CmaError> {
        config.validate()?;
        if start.dim() != config.dim {
            return Err(CmaError::Dimension { expected: config.dim, actual: start.dim() });
        }
        let params = Parameters::new(config.dim, config.population_size);
        let state = CmaState::new(start, config.sigma0);
        let rng = SeededRng::new(config.seed, "cmaes");
        Ok(Self { config, params, state, rng, evaluations: 0 })
    }

    pub fn state(&self) -> &CmaState {
        &self.state
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    /// Samples, evaluates and updates once.
    pub fn step<F, E>(&mut self, objective: &F) -> Result<GenerationRecord, CmaError>
    where
        F: Fn(&LatentVector) -> Result<f64, E> + Sync,
        E: Into<BoxError> + Send,
    {
        let n = self.config.dim;
        let p = &self.params;
        let generation = self.state.generation + 1;

        // Ask.
        let steps: Vec<DVector<f64>> = (0..p.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| self.rng.standard_normal());
                &self.state.transform * z
            })
            .collect();
        let candidates: Vec<LatentVector> = steps
            .iter()
            .map(|y| {
                let x = &self.state.mean + self.state.sigma * y;
                LatentVector::new(x.as_slice().to_vec()).expect("candidate from finite state")
            })
            .collect();

        // Evaluate, keeping candidate order.
        let raw: Vec<Result<f64, E>> = if self.config.parallel {
            candidates.par_iter().map(|c| objective(c)).collect()
        } else {
            candidates.iter().map(|c| objective(c)).collect()
        };
        let mut scores = Vec::with_capacity(p.lambda);
        for (index, r) in raw.into_iter().enumerate() {
            let value = r.map_err(|e| CmaError::Objective { generation, index, source: e.into() })?;
            if !value.is_finite() {
                return Err(CmaError::NonFinite { generation, index, value, candidate: candidates[index].clone() });
            }
            scores.push(value);
        }
        self.evaluations += p.lambda;

        // Stable sort: equal scores keep candidate order.
        let mut order: Vec<usize> = (0..p.lambda).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

        let record = GenerationRecord {
            generation,
            best_candidate: candidates[order[0]].clone(),
            best_score: scores[order[0]],
            evaluations_used: self.evaluations,
            sigma: self.state.sigma,
        };

        // Tell.
        let mut y_w = DVector::zeros(n);
        for (w, &i) in p.weights.iter().zip(&order) {
            y_w.axpy(*w, &steps[i], 1.0);
        }
        let st = &mut self.state;
        st.mean.axpy(st.sigma, &y_w, 1.0);

        let c_sigma_norm = (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let whitened = st.whiten(&y_w);
        st.p_sigma *= 1.0 - p.c_sigma;
        st.p_sigma.axpy(c_sigma_norm, &whitened, 1.0);

        let ps_norm = st.p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - p.c_sigma).powi(2 * generation as i32)).sqrt()
            < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        st.p_c *= 1.0 - p.c_c;
        st.p_c.axpy(h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt(), &y_w, 1.0);

        let delta_h = (1.0 - h) * p.c_c * (2.0 - p.c_c);
        st.covariance *= 1.0 - p.c_1 - p.c_mu + p.c_1 * delta_h;
        st.covariance.ger(p.c_1, &st.p_c, &st.p_c, 1.0);
        for (w, &i) in p.weights.iter().zip(&order) {
            st.covariance.ger(p.c_mu * w, &steps[i], &steps[i], 1.0);
        }

        st.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        st.generation = generation;

        if (st.generation - st.eigen_generation) as f64 > p.eigen_interval {
            st.decompose();
        }
        Ok(record)
    }
}

/// Minimizes `objective` from `start` until a generation's best score drops
/// below `config.truncation` or `config.max_generations` is reached.
pub fn minimize<F, E>(config: &CmaConfig, objective: F, start: &LatentVector) -> Result<Trajectory, CmaError>
where
    F: Fn(&LatentVector) -> Result<f64, E> + Sync,
    E: Into<BoxError> + Send,
{
    let mut opt = Optimizer::new(config.clone(), start)?;
    let mut records = Vec::new();
    loop {
        let record = opt.step(&objective)?;
        let done = record.best_score < config.truncation;
        records.push(record);
        if done {
            return Ok(Trajectory { records, stop_reason: StopReason::Truncation });
        }
        if records.len() >= config.max_generations {
            return Ok(Trajectory { records, stop_reason: StopReason::MaxGenerations });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub threshold: f64,
    pub candidate: LatentVector,
    pub score: f64,
    pub reached: bool,
    pub generation: usize,
}

/// For each threshold, the earliest generation whose best score is below it;
/// when none is, the overall best candidate with `reached = false`.
pub fn first_crossings(traj: &Trajectory, thresholds: &[f64]) -> Result<Vec<Crossing>, CmaError> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(CmaError::Thresholds(thresholds.to_vec()));
    }
    let best = traj.best().ok_or(CmaError::EmptyTrajectory)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (rec, reached) = match traj.records.iter().find(|r| r.best_score < t) {
                Some(r) => (r, true),
                None => (best, false),
            };
            Crossing {
                threshold: t,
                candidate: rec.best_candidate.clone(),
                score: rec.best_score,
                reached,
                generation: rec.generation,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn sphere(x: &LatentVector) -> Result<f64, Infallible> {
        Ok(x.as_slice().iter().map(|v| v * v).sum())
    }

    fn trajectory(scores: &[f64]) -> Trajectory {
        Trajectory {
            records: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| GenerationRecord {
                    generation: i + 1,
                    best_candidate: LatentVector::new(vec![i as f64]).unwrap(),
                    best_score: s,
                    evaluations_used: 4 * (i + 1),
                    sigma: 1.0,
                })
                .collect(),
            stop_reason: StopReason::MaxGenerations,
        }
    }

    #[test]
    fn default_population_matches_formula() {
        assert_eq!(default_population_size(512), 22);
        assert_eq!(default_population_size(10), 10);
        assert_eq!(default_population_size(2), 6);
    }

    #[test]
    fn weights_are_positive_decreasing_and_normalized() {
        let p = Parameters::new(512, 22);
        assert_eq!(p.mu, 11);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.weights.windows(2).all(|w| w[0] > w[1]));
        assert!(p.weights.iter().all(|&w| w > 0.0));
        assert!(p.c_1 + p.c_mu <= 1.0);
    }

    #[test]
    fn stops_in_first_generation_when_already_below_truncation() {
        let mut cfg = CmaConfig::new(3, 1);
        cfg.sigma0 = 0.01;
        cfg.truncation = 0.3;
        let traj = minimize(&cfg, sphere, &LatentVector::zeros(3)).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert_eq!(traj.stop_reason, StopReason::Truncation);
    }

    #[test]
    fn evaluations_per_generation_equal_population() {
        let mut cfg = CmaConfig::new(5, 2);
        cfg.truncation = 1e-30;
        cfg.max_generations = 7;
        let traj = minimize(&cfg, sphere, &LatentVector::new(vec![1.0; 5]).unwrap()).unwrap();
        assert_eq!(traj.records.len(), 7);
        for (i, r) in traj.records.iter().enumerate() {
            assert_eq!(r.evaluations_used, (i + 1) * cfg.population_size);
        }
        assert!(traj.running_best().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_objective_aborts_naming_candidate() {
        let cfg = CmaConfig::new(2, 3);
        let err = minimize(&cfg, |_: &LatentVector| Ok::<_, Infallible>(f64::NAN), &LatentVector::zeros(2)).unwrap_err();
        match err {
            CmaError::NonFinite { generation: 1, index: 0, candidate, .. } => assert_eq!(candidate.dim(), 2),
            other => panic!("unexpected {other}"),
        }
        let err = minimize(&cfg, |_: &LatentVector| Err::<f64, _>("oracle down"), &LatentVector::zeros(2)).unwrap_err();
        assert!(matches!(err, CmaError::Objective { generation: 1, index: 0, .. }));
    }

    #[test]
    fn rejects_bad_configuration() {
        let mut cfg = CmaConfig::new(2, 0);
        cfg.population_size = 3;
        assert!(Optimizer::new(cfg, &LatentVector::zeros(2)).is_err());
        let cfg = CmaConfig::new(2, 0);
        assert!(matches!(Optimizer::new(cfg, &LatentVector::zeros(3)), Err(CmaError::Dimension { .. })));
    }

    #[test]
    fn parallel_evaluation_is_identical_to_sequential() {
        let mut cfg = CmaConfig::new(6, 9);
        cfg.truncation = 1e-12;
        cfg.max_generations = 30;
        let start = LatentVector::new(vec![0.5; 6]).unwrap();
        let a = minimize(&cfg, sphere, &start).unwrap();
        cfg.parallel = true;
        let b = minimize(&cfg, sphere, &start).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crossings_read_directly_from_scores() {
        let traj = trajectory(&[0.9, 0.45, 0.38, 0.25]);
        let c = first_crossings(&traj, &[0.5, 0.4, 0.3]).unwrap();
        assert_eq!(c.iter().map(|c| c.generation).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(c.iter().all(|c| c.reached && c.score < c.threshold));
    }

    #[test]
    fn unreached_threshold_falls_back_to_global_best() {
        let traj = trajectory(&[0.9, 0.45, 0.32, 0.35]);
        let c = first_crossings(&traj, &[0.5, 0.4, 0.3]).unwrap();
        assert!(c[0].reached && c[1].reached);
        assert!(!c[2].reached);
        assert_eq!(c[2].generation, 3);
        assert_eq!(c[2].score, 0.32);
    }

    #[test]
    fn single_threshold_matches_running_minimum_crossing() {
        let traj = trajectory(&[0.9, 0.7, 0.55, 0.49, 0.3]);
        let c = first_crossings(&traj, &[0.5]).unwrap();
        let idx = traj.running_best().iter().position(|&b| b < 0.5).unwrap();
        assert_eq!(c[0].generation, idx + 1);
    }

    #[test]
    fn crossing_errors() {
        let empty = Trajectory { records: vec![], stop_reason: StopReason::MaxGenerations };
        assert!(matches!(first_crossings(&empty, &[0.5]), Err(CmaError::EmptyTrajectory)));
        let t = trajectory(&[1.0]);
        assert!(first_crossings(&t, &[0.3, 0.4]).is_err());
        assert!(first_crossings(&t, &[0.4, 0.4]).is_err());
        assert!(first_crossings(&t, &[]).is_err());
    }
}
