//! Rating study: sessions, batch assignment, per-participant pair order,
//! rating ingestion and attention checks.

pub mod http;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, PairIndex, Rating, RatingLog};
use crate::fsutil::write_atomic;
use crate::latent::SeededRng;
use crate::sampler::SampleType;

pub const SESSIONS_FILE: &str = "sessions.json";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("every batch has its full complement of participants; the study is complete")]
    StudyComplete,
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} expired")]
    Expired(String),
    #[error("{message}")]
    Conflict { message: String, expected_pair: Option<String> },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Setup(String),
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Settable clock for tests and simulations.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub target_per_batch: usize,
    pub expiry_minutes: i64,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { target_per_batch: 10, expiry_minutes: 60, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Complete,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyAnswers {
    pub similarity_strategy: String,
    pub identity_strategy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant_id: String,
    pub batch_id: String,
    pub order: Vec<String>,
    /// Recomputed from `ratings.csv` on load.
    #[serde(skip)]
    pub cursor: usize,
    pub demographics: BTreeMap<String, serde_json::Value>,
    pub strategy: Option<StrategyAnswers>,
    pub state: SessionState,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    pub last_activity: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SessionsFile {
    counter: u64,
    sessions: Vec<Session>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDescriptor {
    pub pair_id: String,
    pub left_image_url: String,
    pub right_image_url: String,
    pub index: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextPair {
    Pair(PairDescriptor),
    Complete { complete: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opened {
    pub session_id: String,
    pub participant_id: String,
    pub batch_id: String,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submitted {
    /// Position of the rated pair in the session order.
    pub index: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProgress {
    pub batch_id: String,
    pub committed: usize,
    pub active: usize,
    pub completed: usize,
    pub expired: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub batches: Vec<BatchProgress>,
    pub ratings: usize,
    pub study_complete: bool,
}

pub fn image_url(image: &crate::oracle::ImageRef) -> String {
    format!("/{}", image.as_str())
}

/// Study state backed by a dataset directory. All mutation goes through
/// `&mut self`; the HTTP layer serializes access with one mutex.
pub struct Study {
    root: PathBuf,
    pairs: PairIndex,
    batch_order: Vec<String>,
    batch_pairs: BTreeMap<String, Vec<String>>,
    ratings: RatingLog,
    sessions: BTreeMap<String, Session>,
    counter: u64,
    config: StudyConfig,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Study {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Study").field("root", &self.root).field("sessions", &self.sessions.len()).finish()
    }
}

impl Study {
    pub fn open(dataset: &Dataset, config: StudyConfig, clock: Arc<dyn Clock>) -> Result<Self, StudyError> {
        if config.target_per_batch == 0 {
            return Err(StudyError::Setup("target_per_batch must be positive".into()));
        }
        let batches = dataset.load_all()?;
        if batches.is_empty() {
            return Err(StudyError::Setup(format!("dataset at {} has no batches", dataset.root().display())));
        }
        if let Some(b) = batches.iter().find(|b| !b.is_materialized()) {
            return Err(StudyError::Setup(format!("batch {} has missing images; rerun `generate`", b.batch_id)));
        }
        let pairs = PairIndex::from_batches(&batches)?;
        let batch_order: Vec<String> = batches.iter().map(|b| b.batch_id.clone()).collect();
        let batch_pairs = batches
            .iter()
            .map(|b| (b.batch_id.clone(), b.samples.iter().map(|s| s.pair_id()).collect()))
            .collect();
        let ratings = dataset.open_ratings()?;

        let path = dataset.root().join(SESSIONS_FILE);
        let file: SessionsFile = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| DatasetError::Json { path: path.clone(), source: e })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => SessionsFile::default(),
            Err(e) => return Err(DatasetError::Io { path, source: e }.into()),
        };
        let mut sessions: BTreeMap<String, Session> =
            file.sessions.into_iter().map(|s| (s.session_id.clone(), s)).collect();
        // sessions.json is only rewritten on state changes; cursor and last
        // activity come from the ratings themselves.
        let mut by_participant: BTreeMap<&str, (usize, Option<DateTime<Utc>>)> = BTreeMap::new();
        for r in ratings.rows() {
            let e = by_participant.entry(&r.participant_id).or_default();
            e.0 += 1;
            if let Ok(t) = DateTime::parse_from_rfc3339(&r.timestamp) {
                e.1 = e.1.max(Some(t.with_timezone(&Utc)));
            }
        }
        for s in sessions.values_mut() {
            let (count, last) = by_participant.get(s.participant_id.as_str()).copied().unwrap_or_default();
            s.cursor = count;
            if let Some(t) = last {
                s.last_activity = s.last_activity.max(t);
            }
            if s.cursor > s.order.len() {
                return Err(StudyError::Setup(format!("participant {} has more ratings than pairs", s.participant_id)));
            }
            if s.cursor == s.order.len() && s.state == SessionState::Active {
                s.state = SessionState::Complete;
            }
        }
        Ok(Self {
            root: dataset.root().to_path_buf(),
            pairs,
            batch_order,
            batch_pairs,
            ratings,
            sessions,
            counter: file.counter,
            config,
            clock,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    pub fn ratings(&self) -> &[Rating] {
        self.ratings.rows()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.get(id)
    }

    pub fn root(&self) -> &std::path::Path {
        &self.root
    }

    fn persist(&self) -> Result<(), StudyError> {
        let file = SessionsFile { counter: self.counter, sessions: self.sessions.values().cloned().collect() };
        let path = self.root.join(SESSIONS_FILE);
        let bytes = serde_json::to_vec_pretty(&file).expect("sessions serialize");
        write_atomic(&path, &bytes).map_err(|e| DatasetError::Io { path, source: e })?;
        Ok(())
    }

    /// Marks idle active sessions expired. Returns whether anything changed.
    fn sweep(&mut self) -> bool {
        let now = self.clock.now();
        let limit = Duration::minutes(self.config.expiry_minutes);
        let mut changed = false;
        for s in self.sessions.values_mut() {
            if s.state == SessionState::Active && now - s.last_activity > limit {
                log::info!("session {} expired at cursor {}", s.session_id, s.cursor);
                s.state = SessionState::Expired;
                changed = true;
            }
        }
        changed
    }

    fn count(&self, batch_id: &str, state: SessionState) -> usize {
        self.sessions.values().filter(|s| s.batch_id == batch_id && s.state == state).count()
    }

    pub fn progress(&mut self) -> Result<Progress, StudyError> {
        if self.sweep() {
            self.persist()?;
        }
        let target = self.config.target_per_batch;
        let batches: Vec<BatchProgress> = self
            .batch_order
            .iter()
            .map(|b| {
                let active = self.count(b, SessionState::Active);
                let completed = self.count(b, SessionState::Complete);
                BatchProgress {
                    batch_id: b.clone(),
                    committed: active + completed,
                    active,
                    completed,
                    expired: self.count(b, SessionState::Expired),
                    target,
                }
            })
            .collect();
        let study_complete = batches.iter().all(|b| b.completed >= target);
        Ok(Progress { batches, ratings: self.ratings.rows().len(), study_complete })
    }

    /// Assigns the least-committed open batch, earliest in the manifest on
    /// ties, with a fresh seeded pair order.
    pub fn open_session(&mut self, demographics: BTreeMap<String, serde_json::Value>) -> Result<Opened, StudyError> {
        self.sweep();
        let target = self.config.target_per_batch;
        let chosen = self
            .batch_order
            .iter()
            .map(|b| (self.count(b, SessionState::Active) + self.count(b, SessionState::Complete), b))
            .filter(|(committed, _)| *committed < target)
            .min_by_key(|(committed, _)| *committed)
            .map(|(_, b)| b.clone());
        let Some(batch_id) = chosen else {
            self.persist()?;
            return Err(StudyError::StudyComplete);
        };

        self.counter += 1;
        let n = self.counter;
        let digest = Sha256::new()
            .chain_update(b"session")
            .chain_update(self.config.seed.to_le_bytes())
            .chain_update(n.to_le_bytes())
            .finalize();
        let session_id = hex::encode(&digest[..16]);
        let participant_id = format!("p{n:04}");
        let seed = u64::from_le_bytes(digest[16..24].try_into().unwrap());
        let order = session_order(seed, &self.batch_pairs[&batch_id]);
        let now = self.clock.now();
        let session = Session {
            session_id: session_id.clone(),
            participant_id: participant_id.clone(),
            batch_id: batch_id.clone(),
            order,
            cursor: 0,
            demographics,
            strategy: None,
            state: SessionState::Active,
            seed,
            created_at: now,
            last_activity: now,
        };
        let total = session.order.len();
        self.sessions.insert(session_id.clone(), session);
        self.persist()?;
        Ok(Opened { session_id, participant_id, batch_id, total })
    }

    fn live_session(&mut self, id: &str) -> Result<&mut Session, StudyError> {
        if self.sweep() {
            self.persist()?;
        }
        let s = self.sessions.get_mut(id).ok_or_else(|| StudyError::UnknownSession(id.to_string()))?;
        if s.state == SessionState::Expired {
            return Err(StudyError::Expired(id.to_string()));
        }
        Ok(s)
    }

    pub fn next_pair(&mut self, session_id: &str) -> Result<NextPair, StudyError> {
        let s = self.live_session(session_id)?;
        if s.cursor >= s.order.len() {
            return Ok(NextPair::Complete { complete: true });
        }
        let (index, total, pair_id) = (s.cursor, s.order.len(), s.order[s.cursor].clone());
        let info = self.pairs.get(&pair_id).expect("session order holds known pairs");
        let url = |i: &Option<crate::oracle::ImageRef>| i.as_ref().map(image_url).unwrap_or_default();
        Ok(NextPair::Pair(PairDescriptor {
            pair_id,
            left_image_url: url(&info.base_image),
            right_image_url: url(&info.sample_image),
            index,
            total,
        }))
    }

    pub fn submit_rating(
        &mut self,
        session_id: &str,
        pair_id: &str,
        similarity: i64,
        same_person: bool,
    ) -> Result<Submitted, StudyError> {
        let now = self.clock.now();
        let s = self.live_session(session_id)?;
        let participant_id = s.participant_id.clone();
        if !(0..=100).contains(&similarity) {
            return Err(StudyError::Invalid(format!("similarity {similarity} outside 0..=100")));
        }
        let similarity = similarity as u8;

        if let Some(prev) = self.ratings.rows().iter().find(|r| r.participant_id == participant_id && r.pair_id == pair_id) {
            if prev.similarity == similarity && prev.same_person == same_person {
                let s = &self.sessions[session_id];
                return Ok(Submitted { index: prev.order_index as usize, complete: s.cursor >= s.order.len() });
            }
            return Err(StudyError::Conflict { message: format!("{pair_id} was already rated"), expected_pair: None });
        }
        let s = &self.sessions[session_id];
        if s.cursor >= s.order.len() {
            return Err(StudyError::Conflict { message: "session is complete".into(), expected_pair: None });
        }
        let expected = &s.order[s.cursor];
        if expected != pair_id {
            return Err(StudyError::Conflict {
                message: format!("expected a rating for {expected}, got {pair_id}; fetch the next pair again"),
                expected_pair: Some(expected.clone()),
            });
        }
        let info = self.pairs.get(pair_id).expect("session order holds known pairs");
        let index = s.cursor;
        let rating = Rating {
            participant_id,
            pair_id: pair_id.to_string(),
            base_id: info.base_id.clone(),
            sample_id: info.sample_id.clone(),
            similarity,
            same_person,
            order_index: index as u32,
            timestamp: now.to_rfc3339_opts(SecondsFormat::Secs, true),
        };
        self.pairs.validate_rating(&rating)?;
        self.ratings.append(rating)?;
        let s = self.sessions.get_mut(session_id).expect("checked above");
        s.cursor += 1;
        s.last_activity = now;
        let complete = s.cursor == s.order.len();
        if complete {
            s.state = SessionState::Complete;
            self.persist()?;
        }
        Ok(Submitted { index, complete })
    }

    pub fn submit_strategy(&mut self, session_id: &str, answers: StrategyAnswers) -> Result<(), StudyError> {
        let s = self.live_session(session_id)?;
        if s.state != SessionState::Complete {
            return Err(StudyError::Conflict {
                message: "the strategy questionnaire opens after the last pair".into(),
                expected_pair: None,
            });
        }
        s.strategy = Some(answers);
        self.persist()
    }

    /// Participants whose session expired; their ratings stay on disk but
    /// are left out of analysis.
    pub fn expired_participants(&self) -> Vec<String> {
        self.sessions.values().filter(|s| s.state == SessionState::Expired).map(|s| s.participant_id.clone()).collect()
    }
}

/// Uniform random permutation of `pairs` determined by `seed`.
pub fn session_order(seed: u64, pairs: &[String]) -> Vec<String> {
    let mut order = pairs.to_vec();
    order.shuffle(&mut SeededRng::new(seed, "order"));
    order
}

/// Reads `sessions.json` next to a dataset and returns the participants of
/// expired sessions. Missing file means none.
pub fn expired_participants(dataset: &Dataset) -> Result<Vec<String>, DatasetError> {
    let path = dataset.root().join(SESSIONS_FILE);
    match fs::read(&path) {
        Ok(bytes) => {
            let file: SessionsFile = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Json { path, source: e })?;
            Ok(file.sessions.into_iter().filter(|s| s.state == SessionState::Expired).map(|s| s.participant_id).collect())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(DatasetError::Io { path, source: e }),
    }
}

pub const ATTENTION_MIN_SAME: usize = 3;
pub const ATTENTION_MIN_MEAN_SIMILARITY: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub participant_id: String,
    pub batch_id: String,
    pub genuine_rated: usize,
    pub genuine_same_person: usize,
    pub mean_genuine_similarity: Option<f64>,
    pub flagged: bool,
}

/// Per participant: how many genuine pairs they called the same person and
/// their mean similarity on those pairs. Flags are advisory.
pub fn attention_report(pairs: &PairIndex, ratings: &[Rating], batch_id: Option<&str>) -> Vec<AttentionEntry> {
    let mut acc: BTreeMap<(String, String), (usize, usize, u64)> = BTreeMap::new();
    for r in ratings {
        let Some(info) = pairs.get(&r.pair_id) else { continue };
        if batch_id.is_some_and(|b| b != info.batch_id) {
            continue;
        }
        let e = acc.entry((r.participant_id.clone(), info.batch_id.clone())).or_default();
        if info.sample_type == SampleType::Genuine {
            e.0 += 1;
            e.1 += r.same_person as usize;
            e.2 += r.similarity as u64;
        }
    }
    acc.into_iter()
        .map(|((participant_id, batch_id), (rated, same, sum))| {
            let mean = (rated > 0).then(|| sum as f64 / rated as f64);
            AttentionEntry {
                participant_id,
                batch_id,
                genuine_rated: rated,
                genuine_same_person: same,
                mean_genuine_similarity: mean,
                flagged: same < ATTENTION_MIN_SAME || mean.is_none_or(|m| m < ATTENTION_MIN_MEAN_SIMILARITY),
            }
        })
        .collect()
}
