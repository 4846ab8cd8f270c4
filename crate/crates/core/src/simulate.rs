//! Synthetic participants that rate a study through its HTTP API.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::RaterModel;
use crate::dataset::PairIndex;
use crate::latent::SeededRng;
use crate::study::{NextPair, Opened, PairDescriptor};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("study service at {url}: {message}")]
    Http { url: String, message: String },
    #[error("the study is already complete; no session could be opened")]
    StudyComplete,
    #[error("service returned unknown pair {0:?}")]
    UnknownPair(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub sessions_opened: usize,
    pub sessions_completed: usize,
    pub ratings_submitted: usize,
    pub conflicts: usize,
    /// The service answered "study complete" before all requested
    /// participants got a session.
    pub study_full: bool,
}

/// One synthetic participant.
pub struct Rater {
    rng: SeededRng,
    scale: f64,
    threshold: f64,
    noise_sd: f64,
}

impl Rater {
    pub fn new(model: &RaterModel, dim: usize, seed: u64, participant_id: &str) -> Self {
        let scale = model.zero_similarity_distance.unwrap_or_else(|| (2.0 * dim as f64).sqrt());
        let mut rng = SeededRng::new(seed, format!("rater:{participant_id}"));
        let threshold = (model.identity_threshold + model.identity_threshold_sd * rng.standard_normal()) * scale;
        Self { rng, scale, threshold, noise_sd: model.noise_sd * scale }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Similarity in 0..=100 and the identity vote for a pair at latent
    /// distance `d`.
    pub fn rate(&mut self, d: f64) -> (u8, bool) {
        let noise = if self.noise_sd > 0.0 { self.noise_sd * self.rng.standard_normal() } else { 0.0 };
        let perceived = (d + noise).max(0.0);
        let sim = (100.0 * (1.0 - perceived / self.scale)).round().clamp(0.0, 100.0) as u8;
        (sim, perceived < self.threshold)
    }
}

struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { agent, base: base.trim_end_matches('/').to_string() }
    }

    fn err(&self, message: impl ToString) -> SimulateError {
        SimulateError::Http { url: self.base.clone(), message: message.to_string() }
    }

    fn call(&self, method: &str, path: &str, body: Option<serde_json::Value>) -> Result<(u16, serde_json::Value), SimulateError> {
        let url = format!("{}{path}", self.base);
        let resp = match (method, body) {
            ("GET", _) => self.agent.get(&url).call(),
            (_, Some(b)) => self.agent.post(&url).send_json(b),
            (_, None) => self.agent.post(&url).send_empty(),
        };
        let mut resp = resp.map_err(|e| self.err(e))?;
        let status = resp.status().as_u16();
        let value = resp.body_mut().read_json::<serde_json::Value>().map_err(|e| self.err(e))?;
        Ok((status, value))
    }
}

/// Opens up to `participants` sessions one after another, then rates them
/// with `model.concurrency` sessions in flight at a time. Sessions are opened
/// sequentially so batch assignment does not depend on thread timing.
pub fn simulate(
    base_url: &str,
    pairs: &PairIndex,
    model: &RaterModel,
    dim: usize,
    participants: usize,
    seed: u64,
) -> Result<SimulateReport, SimulateError> {
    let client = Client::new(base_url);
    let mut report = SimulateReport::default();
    let mut opened: Vec<Opened> = Vec::new();
    for i in 0..participants {
        let demographics = json!({ "demographics": { "simulated": true, "index": i } });
        let (status, body) = client.call("POST", "/api/session", Some(demographics))?;
        match status {
            201 | 200 => opened.push(serde_json::from_value(body).map_err(|e| client.err(e))?),
            410 => {
                report.study_full = true;
                break;
            }
            s => return Err(client.err(format!("open session: HTTP {s}: {body}"))),
        }
    }
    if opened.is_empty() && participants > 0 {
        return Err(SimulateError::StudyComplete);
    }
    report.sessions_opened = opened.len();

    let totals = Mutex::new(&mut report);
    let first_error: Mutex<Option<SimulateError>> = Mutex::new(None);
    for chunk in opened.chunks(model.concurrency.max(1)) {
        std::thread::scope(|scope| {
            for session in chunk {
                let (client, totals, first_error) = (&client, &totals, &first_error);
                scope.spawn(move || match run_session(client, pairs, model, dim, seed, session) {
                    Ok((rated, conflicts)) => {
                        let mut t = totals.lock().unwrap();
                        t.sessions_completed += 1;
                        t.ratings_submitted += rated;
                        t.conflicts += conflicts;
                    }
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                    }
                });
            }
        });
        if let Some(e) = first_error.lock().unwrap().take() {
            return Err(e);
        }
    }
    drop(totals);
    Ok(report)
}

fn run_session(
    client: &Client,
    pairs: &PairIndex,
    model: &RaterModel,
    dim: usize,
    seed: u64,
    session: &Opened,
) -> Result<(usize, usize), SimulateError> {
    let mut rater = Rater::new(model, dim, seed, &session.participant_id);
    let sid = &session.session_id;
    let (mut rated, mut conflicts) = (0, 0);
    loop {
        let (status, body) = client.call("GET", &format!("/api/session/{sid}/next"), None)?;
        if status != 200 {
            return Err(client.err(format!("next pair: HTTP {status}: {body}")));
        }
        let pair: PairDescriptor = match serde_json::from_value(body).map_err(|e| client.err(e))? {
            NextPair::Pair(p) => p,
            NextPair::Complete { .. } => break,
        };
        let info = pairs.get(&pair.pair_id).ok_or_else(|| SimulateError::UnknownPair(pair.pair_id.clone()))?;
        let (similarity, same_person) = rater.rate(info.latent_distance.unwrap_or(0.0));
        let body = json!({ "pair_id": pair.pair_id, "similarity": similarity, "same_person": same_person });
        let (status, resp) = client.call("POST", &format!("/api/session/{sid}/rating"), Some(body))?;
        match status {
            200 => rated += 1,
            409 => conflicts += 1,
            s => return Err(client.err(format!("rating: HTTP {s}: {resp}"))),
        }
    }
    let answers = json!({
        "similarity_strategy": "compared overall facial shape",
        "identity_strategy": "looked at eyes and nose",
    });
    let (status, body) = client.call("POST", &format!("/api/session/{sid}/strategy"), Some(answers))?;
    if status != 200 {
        return Err(client.err(format!("strategy: HTTP {status}: {body}")));
    }
    Ok((rated, conflicts))
}
