//! Per-pair aggregates, the per-type summary, correlations with human
//! identity judgments, disagreement rankings and distribution exports.

pub mod export;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PairIndex, Rating, ScoreTable};
use crate::oracle::known_threshold;
use crate::pipeline::LATENT_MODEL;
use crate::sampler::SampleType;
use crate::study::{attention_report, AttentionEntry};
use stats::{acceptance_rate, mean, pearson, sample_sd, stars, CorrelationError};

/// Row order of summary and correlation tables.
pub const TYPE_ORDER: [SampleType; 5] =
    [SampleType::Genuine, SampleType::Positive, SampleType::Negative, SampleType::Interpolation, SampleType::Optimized];

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("model {model:?} scores every pair identically ({value}); min-max normalization is undefined")]
    DegenerateNormalization { model: String, value: f64 },
    #[error("model {0:?} has no scores for any rated pair")]
    NoScores(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAggregate {
    pub pair_id: String,
    pub batch_id: String,
    pub sample_type: SampleType,
    pub level: Option<f64>,
    pub n_ratings: usize,
    pub mean_similarity: f64,
    pub identity_fraction: f64,
    pub rater_similarity_sd: Option<f64>,
    pub rater_identity_sd: Option<f64>,
    pub latent_distance: Option<f64>,
    /// `None` for a missing score.
    pub model_distances: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub pairs: Vec<PairAggregate>,
    /// Pairs without any rating, left out of everything else.
    pub unrated: Vec<String>,
    pub models: Vec<String>,
}

/// Ratings grouped per pair in participant order, so every sum below runs
/// in the same order however the input was shuffled.
fn ratings_by_pair(ratings: &[Rating]) -> BTreeMap<&str, Vec<&Rating>> {
    let mut by: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
    for r in ratings {
        by.entry(&r.pair_id).or_default().push(r);
    }
    for v in by.values_mut() {
        v.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    }
    by
}

pub fn aggregate(pairs: &PairIndex, ratings: &[Rating], scores: &ScoreTable) -> Aggregation {
    let models: Vec<String> = scores.models().into_iter().filter(|m| m != LATENT_MODEL).collect();
    let by_pair = ratings_by_pair(ratings);
    let mut out = Vec::new();
    let mut unrated = Vec::new();
    for p in pairs.pairs() {
        let Some(rs) = by_pair.get(p.pair_id.as_str()) else {
            unrated.push(p.pair_id.clone());
            continue;
        };
        let sims: Vec<f64> = rs.iter().map(|r| r.similarity as f64).collect();
        let ids: Vec<f64> = rs.iter().map(|r| r.same_person as u8 as f64).collect();
        let latent = p.latent_distance.or_else(|| scores.get(&p.pair_id, LATENT_MODEL).flatten());
        out.push(PairAggregate {
            pair_id: p.pair_id.clone(),
            batch_id: p.batch_id.clone(),
            sample_type: p.sample_type,
            level: p.level,
            n_ratings: rs.len(),
            mean_similarity: mean(&sims).unwrap(),
            identity_fraction: mean(&ids).unwrap(),
            rater_similarity_sd: sample_sd(&sims),
            rater_identity_sd: sample_sd(&ids),
            latent_distance: latent,
            model_distances: models.iter().map(|m| (m.clone(), scores.get(&p.pair_id, m).flatten())).collect(),
        });
    }
    Aggregation { pairs: out, unrated, models }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mean_distance: Option<f64>,
    /// Pairs with a score.
    pub n: usize,
    pub threshold: Option<f64>,
    pub acceptance_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sample_type: SampleType,
    /// `None` on the row covering every level of the type.
    pub level: Option<f64>,
    pub n_pairs: usize,
    pub n_ratings: usize,
    /// Pooled over individual ratings.
    pub mean_similarity: f64,
    pub mean_identity: f64,
    pub mean_latent_distance: Option<f64>,
    pub models: BTreeMap<String, ModelSummary>,
}

fn threshold_for(model: &str, overrides: &BTreeMap<String, f64>) -> Option<f64> {
    overrides.get(model).copied().or_else(|| known_threshold(model))
}

fn summary_row(
    sample_type: SampleType,
    level: Option<f64>,
    rows: &[&PairAggregate],
    models: &[String],
    thresholds: &BTreeMap<String, f64>,
) -> SummaryRow {
    let n_ratings: usize = rows.iter().map(|p| p.n_ratings).sum();
    let sim_sum: f64 = rows.iter().map(|p| p.mean_similarity * p.n_ratings as f64).sum();
    let id_sum: f64 = rows.iter().map(|p| p.identity_fraction * p.n_ratings as f64).sum();
    let latent: Vec<f64> = rows.iter().filter_map(|p| p.latent_distance).collect();
    let models = models
        .iter()
        .map(|m| {
            let d: Vec<f64> = rows.iter().filter_map(|p| p.model_distances.get(m).copied().flatten()).collect();
            let threshold = threshold_for(m, thresholds);
            let summary = ModelSummary {
                mean_distance: mean(&d),
                n: d.len(),
                threshold,
                acceptance_rate: threshold.and_then(|t| acceptance_rate(&d, t)),
            };
            (m.clone(), summary)
        })
        .collect();
    SummaryRow {
        sample_type,
        level,
        n_pairs: rows.len(),
        n_ratings,
        mean_similarity: sim_sum / n_ratings as f64,
        mean_identity: id_sum / n_ratings as f64,
        mean_latent_distance: mean(&latent),
        models,
    }
}

/// One row per sample type followed by one per level of that type.
pub fn summarize(agg: &Aggregation, thresholds: &BTreeMap<String, f64>) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for t in TYPE_ORDER {
        let rows: Vec<&PairAggregate> = agg.pairs.iter().filter(|p| p.sample_type == t).collect();
        if rows.is_empty() {
            continue;
        }
        out.push(summary_row(t, None, &rows, &agg.models, thresholds));
        let mut levels: Vec<f64> = rows.iter().filter_map(|p| p.level).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for l in levels {
            let sub: Vec<&PairAggregate> = rows.iter().copied().filter(|p| p.level == Some(l)).collect();
            out.push(summary_row(t, Some(l), &sub, &agg.models, thresholds));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
    pub stars: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined: Option<CorrelationError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    /// `all` or a sample type.
    pub subset: String,
    pub cells: BTreeMap<String, CorrelationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    /// `pair` (per-pair means) or `rating` (individual ratings).
    pub observation: String,
    /// Every column is correlated with human identity.
    pub columns: Vec<String>,
    pub rows: Vec<CorrelationRow>,
}

pub const SIMILARITY_COLUMN: &str = "similarity";

fn cell(x: &[f64], y: &[f64]) -> CorrelationCell {
    match pearson(x, y) {
        Ok(c) => CorrelationCell {
            r: Some(c.r),
            p_value: Some(c.p_value),
            n: c.n,
            stars: stars(c.p_value).to_string(),
            undefined: None,
        },
        Err(e) => CorrelationCell { r: None, p_value: None, n: x.len(), stars: String::new(), undefined: Some(e) },
    }
}

/// Human identity against rated similarity, every model and latent distance,
/// overall and per type. Genuine pairs are left out: their distances are
/// constant. Missing values drop out pairwise.
pub fn correlations(agg: &Aggregation, ratings: &[Rating], per_rating: bool) -> CorrelationTable {
    let mut columns = vec![SIMILARITY_COLUMN.to_string()];
    columns.extend(agg.models.iter().cloned());
    columns.push(LATENT_MODEL.to_string());

    // (identity, similarity, distances by column) per observation.
    let mut obs: Vec<(SampleType, f64, f64, &PairAggregate)> = Vec::new();
    if per_rating {
        let by_pair = ratings_by_pair(ratings);
        for p in &agg.pairs {
            for r in by_pair.get(p.pair_id.as_str()).into_iter().flatten() {
                obs.push((p.sample_type, r.same_person as u8 as f64, r.similarity as f64, p));
            }
        }
    } else {
        obs.extend(agg.pairs.iter().map(|p| (p.sample_type, p.identity_fraction, p.mean_similarity, p)));
    }
    obs.retain(|o| o.0 != SampleType::Genuine);

    let mut subsets: Vec<(String, Option<SampleType>)> = vec![("all".into(), None)];
    subsets.extend(TYPE_ORDER.iter().filter(|t| **t != SampleType::Genuine).map(|t| (t.name().to_string(), Some(*t))));
    let rows = subsets
        .into_iter()
        .map(|(name, t)| {
            let sel: Vec<_> = obs.iter().filter(|o| t.is_none_or(|t| o.0 == t)).collect();
            let cells = columns
                .iter()
                .map(|col| {
                    let (x, y): (Vec<f64>, Vec<f64>) = sel
                        .iter()
                        .filter_map(|(_, id, sim, p)| {
                            let v = if col == SIMILARITY_COLUMN {
                                Some(*sim)
                            } else if col == LATENT_MODEL {
                                p.latent_distance
                            } else {
                                p.model_distances.get(col).copied().flatten()
                            };
                            v.map(|v| (*id, v))
                        })
                        .unzip();
                    (col.clone(), cell(&x, &y))
                })
                .collect();
            CorrelationRow { subset: name, cells }
        })
        .collect();
    CorrelationTable { observation: if per_rating { "rating" } else { "pair" }.into(), columns, rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The model finds the pair more alike than people do.
    ModelMoreSimilar,
    HumansMoreSimilar,
    Agree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementEntry {
    pub pair_id: String,
    pub sample_type: SampleType,
    pub score: f64,
    pub direction: Direction,
    pub identity_fraction: f64,
    pub distance: f64,
    pub normalized_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub model: String,
    pub distance_min: f64,
    pub distance_max: f64,
    /// Every scored pair, most negative score first, ties by pair id.
    pub entries: Vec<DisagreementEntry>,
}

impl Disagreement {
    pub fn model_more_similar(&self, k: usize) -> Vec<DisagreementEntry> {
        self.entries.iter().filter(|e| e.score < 0.0).take(k).cloned().collect()
    }

    pub fn humans_more_similar(&self, k: usize) -> Vec<DisagreementEntry> {
        let mut v: Vec<_> = self.entries.iter().filter(|e| e.score > 0.0).cloned().collect();
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.pair_id.cmp(&b.pair_id)));
        v.truncate(k);
        v
    }
}

/// Signed gap between human identity and the model's min-max normalized,
/// inverted distance.
pub fn disagreement(agg: &Aggregation, model: &str) -> Result<Disagreement, AnalysisError> {
    let scored: Vec<(&PairAggregate, f64)> =
        agg.pairs.iter().filter_map(|p| p.model_distances.get(model).copied().flatten().map(|d| (p, d))).collect();
    if scored.is_empty() {
        return Err(AnalysisError::NoScores(model.to_string()));
    }
    let lo = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Err(AnalysisError::DegenerateNormalization { model: model.to_string(), value: lo });
    }
    let mut entries: Vec<DisagreementEntry> = scored
        .into_iter()
        .map(|(p, d)| {
            let normalized_similarity = 1.0 - (d - lo) / (hi - lo);
            let score = p.identity_fraction - normalized_similarity;
            let direction = if score < 0.0 {
                Direction::ModelMoreSimilar
            } else if score > 0.0 {
                Direction::HumansMoreSimilar
            } else {
                Direction::Agree
            };
            DisagreementEntry {
                pair_id: p.pair_id.clone(),
                sample_type: p.sample_type,
                score,
                direction,
                identity_fraction: p.identity_fraction,
                distance: d,
                normalized_similarity,
            }
        })
        .collect();
    entries.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.pair_id.cmp(&b.pair_id)));
    Ok(Disagreement { model: model.to_string(), distance_min: lo, distance_max: hi, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterSpread {
    pub pair_id: String,
    pub sample_type: SampleType,
    pub n_ratings: usize,
    pub similarity_sd: f64,
    pub identity_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterDisagreement {
    /// Largest similarity spread first, ties by pair id.
    pub by_similarity: Vec<RaterSpread>,
    pub by_identity: Vec<RaterSpread>,
    /// Pairs with fewer than two ratings.
    pub excluded: Vec<String>,
}

pub fn rater_disagreement(agg: &Aggregation) -> RaterDisagreement {
    let mut spreads = Vec::new();
    let mut excluded = Vec::new();
    for p in &agg.pairs {
        match (p.rater_similarity_sd, p.rater_identity_sd) {
            (Some(s), Some(i)) => spreads.push(RaterSpread {
                pair_id: p.pair_id.clone(),
                sample_type: p.sample_type,
                n_ratings: p.n_ratings,
                similarity_sd: s,
                identity_sd: i,
            }),
            _ => excluded.push(p.pair_id.clone()),
        }
    }
    let mut by_similarity = spreads.clone();
    by_similarity.sort_by(|a, b| b.similarity_sd.total_cmp(&a.similarity_sd).then_with(|| a.pair_id.cmp(&b.pair_id)));
    let mut by_identity = spreads;
    by_identity.sort_by(|a, b| b.identity_sd.total_cmp(&a.identity_sd).then_with(|| a.pair_id.cmp(&b.pair_id)));
    RaterDisagreement { by_similarity, by_identity, excluded }
}

pub const BIN_WIDTH: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub sample_type: SampleType,
    pub lower: u8,
    /// Exclusive except for the last bin, which holds 100.
    pub upper: u8,
    pub count: usize,
}

pub fn bin_index(similarity: u8) -> usize {
    (similarity.min(99) / BIN_WIDTH) as usize
}

/// Similarity rating histograms per sample type, bins of width 5 over
/// [0, 100].
pub fn similarity_histograms(pairs: &PairIndex, ratings: &[Rating]) -> Vec<HistogramBin> {
    let n_bins = (100 / BIN_WIDTH) as usize;
    let mut counts: HashMap<SampleType, Vec<usize>> = HashMap::new();
    for r in ratings {
        let Some(p) = pairs.get(&r.pair_id) else { continue };
        counts.entry(p.sample_type).or_insert_with(|| vec![0; n_bins])[bin_index(r.similarity)] += 1;
    }
    let mut out = Vec::new();
    for t in TYPE_ORDER {
        let Some(c) = counts.get(&t) else { continue };
        for (i, &count) in c.iter().enumerate() {
            let lower = i as u8 * BIN_WIDTH;
            out.push(HistogramBin { sample_type: t, lower, upper: lower + BIN_WIDTH, count });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolinPoint {
    pub sample_type: SampleType,
    pub same_person: bool,
    pub model_name: String,
    pub pair_id: String,
    pub participant_id: String,
    pub distance: f64,
}

/// One point per (rating, model): the model's distance for the rated pair,
/// split by the rater's identity vote.
pub fn violin_points(agg: &Aggregation, ratings: &[Rating]) -> Vec<ViolinPoint> {
    let by_pair = ratings_by_pair(ratings);
    let mut cols: Vec<String> = agg.models.clone();
    cols.push(LATENT_MODEL.into());
    let mut out = Vec::new();
    for t in TYPE_ORDER {
        for p in agg.pairs.iter().filter(|p| p.sample_type == t) {
            for r in by_pair.get(p.pair_id.as_str()).into_iter().flatten() {
                for m in &cols {
                    let d = if m == LATENT_MODEL { p.latent_distance } else { p.model_distances.get(m).copied().flatten() };
                    if let Some(distance) = d {
                        out.push(ViolinPoint {
                            sample_type: t,
                            same_person: r.same_person,
                            model_name: m.clone(),
                            pair_id: p.pair_id.clone(),
                            participant_id: r.participant_id.clone(),
                            distance,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub batches: usize,
    pub pairs: usize,
    pub rated_pairs: usize,
    pub ratings: usize,
    pub participants: usize,
    pub excluded_participants: Vec<String>,
    pub unrated_pairs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementSection {
    pub model: String,
    pub top_k: usize,
    pub model_more_similar: Vec<DisagreementEntry>,
    pub humans_more_similar: Vec<DisagreementEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterSection {
    pub top_k: usize,
    pub by_similarity: Vec<RaterSpread>,
    pub by_identity: Vec<RaterSpread>,
    pub excluded_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    /// Genuine pairs should be judged the same person more often than
    /// negatives; `None` when either type is unrated.
    pub genuine_identity_exceeds_negative: Option<bool>,
}

/// Everything `report.json` holds. Contains no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub counts: Counts,
    pub summary: Vec<SummaryRow>,
    pub correlations: CorrelationTable,
    pub disagreement: DisagreementSection,
    pub rater_disagreement: RaterSection,
    pub attention: Vec<AttentionEntry>,
    pub checks: Checks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub model: String,
    pub top_k: usize,
    pub per_rating: bool,
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { model: "dlib".into(), top_k: 8, per_rating: false, thresholds: BTreeMap::new() }
    }
}

pub fn build_report(
    pairs: &PairIndex,
    ratings: &[Rating],
    scores: &ScoreTable,
    excluded_participants: &[String],
    options: &ReportOptions,
) -> (Report, Aggregation) {
    let excluded: BTreeSet<&str> = excluded_participants.iter().map(String::as_str).collect();
    let kept: Vec<Rating> = ratings.iter().filter(|r| !excluded.contains(r.participant_id.as_str())).cloned().collect();
    let agg = aggregate(pairs, &kept, scores);
    let summary = summarize(&agg, &options.thresholds);
    let correlations = correlations(&agg, &kept, options.per_rating);
    let disagreement = match disagreement(&agg, &options.model) {
        Ok(d) => DisagreementSection {
            model: options.model.clone(),
            top_k: options.top_k,
            model_more_similar: d.model_more_similar(options.top_k),
            humans_more_similar: d.humans_more_similar(options.top_k),
            error: None,
        },
        Err(e) => DisagreementSection {
            model: options.model.clone(),
            top_k: options.top_k,
            model_more_similar: vec![],
            humans_more_similar: vec![],
            error: Some(e.to_string()),
        },
    };
    let rd = rater_disagreement(&agg);
    let identity_of = |t: SampleType| summary.iter().find(|r| r.sample_type == t && r.level.is_none()).map(|r| r.mean_identity);
    let checks = Checks {
        genuine_identity_exceeds_negative: identity_of(SampleType::Genuine)
            .zip(identity_of(SampleType::Negative))
            .map(|(g, n)| g >= n),
    };
    let participants: BTreeSet<&str> = kept.iter().map(|r| r.participant_id.as_str()).collect();
    let batches: BTreeSet<&str> = pairs.pairs().iter().map(|p| p.batch_id.as_str()).collect();
    let report = Report {
        counts: Counts {
            batches: batches.len(),
            pairs: pairs.len(),
            rated_pairs: agg.pairs.len(),
            ratings: kept.len(),
            participants: participants.len(),
            excluded_participants: excluded.iter().map(|s| s.to_string()).collect(),
            unrated_pairs: agg.unrated.clone(),
        },
        summary,
        correlations,
        disagreement,
        rater_disagreement: RaterSection {
            top_k: options.top_k,
            by_similarity: rd.by_similarity.into_iter().take(options.top_k).collect(),
            by_identity: rd.by_identity.into_iter().take(options.top_k).collect(),
            excluded_pairs: rd.excluded.len(),
        },
        attention: attention_report(pairs, &kept, None),
        checks,
    };
    (report, agg)
}
