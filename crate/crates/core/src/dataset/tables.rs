//! `ratings.csv` and `scores.csv`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::fsutil::write_atomic;

pub const RATINGS_HEADER: [&str; 8] =
    ["participant_id", "pair_id", "base_id", "sample_id", "similarity", "same_person", "order_index", "timestamp"];
pub const SCORES_HEADER: [&str; 3] = ["pair_id", "model_name", "distance"];
pub const MISSING: &str = "NA";

/// One human judgment of one (base, sample) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub participant_id: String,
    pub pair_id: String,
    pub base_id: String,
    pub sample_id: String,
    pub similarity: u8,
    pub same_person: bool,
    pub order_index: u32,
    /// UTC, informational only.
    pub timestamp: String,
}

impl Rating {
    fn to_record(&self) -> [String; 8] {
        [
            self.participant_id.clone(),
            self.pair_id.clone(),
            self.base_id.clone(),
            self.sample_id.clone(),
            self.similarity.to_string(),
            if self.same_person { "1" } else { "0" }.to_string(),
            self.order_index.to_string(),
            self.timestamp.clone(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: u64, file: &Path) -> Result<Self, DatasetError> {
        let bad = |msg: String| DatasetError::Malformed { file: file.to_path_buf(), line, message: msg };
        if rec.len() != RATINGS_HEADER.len() {
            return Err(bad(format!("expected {} fields, got {}", RATINGS_HEADER.len(), rec.len())));
        }
        let similarity: u8 = rec[4].parse().map_err(|_| bad(format!("similarity {:?} is not an integer", &rec[4])))?;
        if similarity > 100 {
            return Err(bad(format!("similarity {similarity} outside 0..=100")));
        }
        let same_person = match &rec[5] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("same_person {other:?} is not 0 or 1"))),
        };
        let order_index = rec[6].parse().map_err(|_| bad(format!("order_index {:?} is not an integer", &rec[6])))?;
        Ok(Self {
            participant_id: rec[0].to_string(),
            pair_id: rec[1].to_string(),
            base_id: rec[2].to_string(),
            sample_id: rec[3].to_string(),
            similarity,
            same_person,
            order_index,
            timestamp: rec[7].to_string(),
        })
    }
}

fn header_check(reader: &mut csv::Reader<&[u8]>, expected: &[&str], file: &Path) -> Result<(), DatasetError> {
    let header = reader.headers().map_err(|e| DatasetError::Malformed {
        file: file.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(DatasetError::Malformed {
            file: file.to_path_buf(),
            line: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }
    Ok(())
}


fn encode_rows<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    w.into_inner().unwrap()
}

pub fn parse_ratings(bytes: &[u8], file: &Path) -> Result<Vec<Rating>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    header_check(&mut reader, &RATINGS_HEADER, file)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DatasetError::Malformed {
            file: file.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(Rating::from_record(&rec, line, file)?);
    }
    Ok(out)
}

/// Canonical ratings table: sorted by participant, then presentation order.
pub fn encode_ratings(ratings: &[Rating]) -> Vec<u8> {
    let mut sorted: Vec<&Rating> = ratings.iter().collect();
    sorted.sort_by(|a, b| (&a.participant_id, a.order_index, &a.pair_id).cmp(&(&b.participant_id, b.order_index, &b.pair_id)));
    encode_rows(&RATINGS_HEADER, sorted.into_iter().map(|r| r.to_record()))
}

/// Append-only `ratings.csv`. Each row goes out in one write followed by a
/// sync; a torn final line left by a crash is dropped when the log is opened.
#[derive(Debug)]
pub struct RatingLog {
    path: PathBuf,
    file: File,
    rows: Vec<Rating>,
    seen: HashSet<(String, String)>,
}

impl RatingLog {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let io_err = |e: io::Error| DatasetError::Io { path: path.to_path_buf(), source: e };
        let mut rows = Vec::new();
        if path.exists() {
            let mut bytes = fs::read(path).map_err(io_err)?;
            if let Some(last_newline) = bytes.iter().rposition(|&b| b == b'\n') {
                if last_newline + 1 != bytes.len() {
                    log::warn!("{}: dropping torn final line", path.display());
                    bytes.truncate(last_newline + 1);
                    write_atomic(path, &bytes).map_err(io_err)?;
                }
            } else {
                bytes.clear();
            }
            if !bytes.is_empty() {
                rows = parse_ratings(&bytes, path)?;
            }
        }
        if rows.is_empty() && fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true) {
            write_atomic(path, &encode_rows(&RATINGS_HEADER, std::iter::empty::<[&str; 8]>())).map_err(io_err)?;
        }
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert((r.participant_id.clone(), r.pair_id.clone())) {
                return Err(DatasetError::DuplicateRating { participant_id: r.participant_id.clone(), pair_id: r.pair_id.clone() });
            }
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io_err)?;
        Ok(Self { path: path.to_path_buf(), file, rows, seen })
    }

    pub fn rows(&self) -> &[Rating] {
        &self.rows
    }

    pub fn contains(&self, participant_id: &str, pair_id: &str) -> bool {
        self.seen.contains(&(participant_id.to_string(), pair_id.to_string()))
    }

    /// Appends one already-validated rating.
    pub fn append(&mut self, rating: Rating) -> Result<(), DatasetError> {
        let key = (rating.participant_id.clone(), rating.pair_id.clone());
        if self.seen.contains(&key) {
            return Err(DatasetError::DuplicateRating { participant_id: key.0, pair_id: key.1 });
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(rating.to_record()).unwrap();
        let line = w.into_inner().unwrap();
        let io_err = |e: io::Error| DatasetError::Io { path: self.path.clone(), source: e };
        self.file.write_all(&line).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)?;
        self.seen.insert(key);
        self.rows.push(rating);
        Ok(())
    }
}

/// Model distances keyed by `(pair_id, model_name)`; `None` marks a score the
/// model could not produce.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    records: BTreeMap<(String, String), Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub model_name: String,
    pub distance: Option<f64>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, pair_id: &str, model: &str) -> Option<Option<f64>> {
        self.records.get(&(pair_id.to_string(), model.to_string())).copied()
    }

    pub fn contains(&self, pair_id: &str, model: &str) -> bool {
        self.get(pair_id, model).is_some()
    }

    pub fn insert(&mut self, record: ScoreRecord) {
        self.records.insert((record.pair_id, record.model_name), record.distance);
    }

    pub fn models(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.records.keys().map(|(_, m)| m).collect();
        set.into_iter().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = ScoreRecord> + '_ {
        self.records.iter().map(|((p, m), d)| ScoreRecord { pair_id: p.clone(), model_name: m.clone(), distance: *d })
    }

    /// Parses and validates a scores table. Any bad row rejects the whole
    /// table, naming its line.
    pub fn parse(bytes: &[u8], file: &Path, known_pairs: Option<&HashSet<String>>) -> Result<Vec<ScoreRecord>, DatasetError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        header_check(&mut reader, &SCORES_HEADER, file)?;
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| DatasetError::Malformed {
                file: file.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |message: String| DatasetError::Malformed { file: file.to_path_buf(), line, message };
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", rec.len())));
            }
            let (pair_id, model) = (&rec[0], &rec[1]);
            if model.is_empty() {
                return Err(bad("empty model_name".into()));
            }
            if let Some(pairs) = known_pairs {
                if !pairs.contains(pair_id) {
                    return Err(bad(format!("unknown pair_id {pair_id:?}")));
                }
            }
            let distance = match &rec[2] {
                MISSING => None,
                text => {
                    let d: f64 = text.parse().map_err(|_| bad(format!("distance {text:?} is neither a number nor NA")))?;
                    if !d.is_finite() || d < 0.0 {
                        return Err(bad(format!("distance {text} must be finite and non-negative")));
                    }
                    Some(d)
                }
            };
            if !seen.insert((pair_id.to_string(), model.to_string())) {
                return Err(bad(format!("second score for ({pair_id}, {model})")));
            }
            out.push(ScoreRecord { pair_id: pair_id.to_string(), model_name: model.to_string(), distance });
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?;
        let mut table = Self::default();
        for r in Self::parse(&bytes, path, None)? {
            table.insert(r);
        }
        Ok(table)
    }

    /// Canonical form: sorted by pair then model, shortest round-trip
    /// decimals, `NA` for missing, LF line endings.
    pub fn encode(&self) -> Vec<u8> {
        encode_rows(
            &SCORES_HEADER,
            self.records.iter().map(|((p, m), d)| {
                [p.clone(), m.clone(), d.map_or_else(|| MISSING.to_string(), |d| format!("{d}"))]
            }),
        )
    }
}
