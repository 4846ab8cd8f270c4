//! CSV tables behind the distribution plots and the per-pair aggregates.

use crate::dataset::MISSING;

use super::{HistogramBin, PairAggregate, ViolinPoint};

pub const HISTOGRAMS_FILE: &str = "histograms.csv";
pub const VIOLINS_FILE: &str = "violins.csv";
pub const AGGREGATES_FILE: &str = "pair_aggregates.csv";

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), |v| format!("{v}"))
}

pub fn histograms_csv(bins: &[HistogramBin]) -> Vec<u8> {
    let mut w = writer();
    w.write_record(["sample_type", "lower", "upper", "count"]).unwrap();
    for b in bins {
        w.write_record([b.sample_type.name().to_string(), b.lower.to_string(), b.upper.to_string(), b.count.to_string()])
            .unwrap();
    }
    w.into_inner().unwrap()
}

pub fn violins_csv(points: &[ViolinPoint]) -> Vec<u8> {
    let mut w = writer();
    w.write_record(["sample_type", "same_person", "model_name", "pair_id", "participant_id", "distance"]).unwrap();
    for p in points {
        w.write_record([
            p.sample_type.name(),
            if p.same_person { "1" } else { "0" },
            &p.model_name,
            &p.pair_id,
            &p.participant_id,
            &format!("{}", p.distance),
        ])
        .unwrap();
    }
    w.into_inner().unwrap()
}

/// One row per rated pair; model columns follow `models`.
pub fn aggregates_csv(pairs: &[PairAggregate], models: &[String]) -> Vec<u8> {
    let mut w = writer();
    let mut header: Vec<String> = [
        "pair_id",
        "batch_id",
        "sample_type",
        "level",
        "n_ratings",
        "mean_similarity",
        "identity_fraction",
        "rater_similarity_sd",
        "rater_identity_sd",
        "latent_distance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(models.iter().cloned());
    w.write_record(&header).unwrap();
    for p in pairs {
        let mut row = vec![
            p.pair_id.clone(),
            p.batch_id.clone(),
            p.sample_type.name().to_string(),
            opt(p.level),
            p.n_ratings.to_string(),
            format!("{}", p.mean_similarity),
            format!("{}", p.identity_fraction),
            opt(p.rater_similarity_sd),
            opt(p.rater_identity_sd),
            opt(p.latent_distance),
        ];
        row.extend(models.iter().map(|m| opt(p.model_distances.get(m).copied().flatten())));
        w.write_record(&row).unwrap();
    }
    w.into_inner().unwrap()
}
