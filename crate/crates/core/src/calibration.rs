//! Entity-type weighting and keyword-level entropy calibration.
//!
//! Type weights come from the area under each entity type's table-level
//! recall curve on training questions:
//! `w(λ) = |Λ| · AUC(λ)² / Σ AUC(λ')²`, so the weights always sum to the
//! number of types. Entropy calibration is optional and off by default.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{EntityKind, TableRef};
use crate::index::RetrievalHit;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_N_MAX: usize = 50;
pub const DEFAULT_TRAINING_SAMPLES: usize = 200;
pub const DEFAULT_ENTROPY_ALPHA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no training questions")]
    EmptyTraining,
    #[error("training question {0} has no gold tables")]
    EmptyGold(usize),
    #[error("n_max must be at least 1")]
    InvalidNMax,
    #[error("every AUC is zero; fall back to uniform weights")]
    Degenerate,
    #[error("weights file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Macro-averaged table recall at every cutoff `N = 1..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub kind: EntityKind,
    /// `points[i]` is the recall at `N = i + 1`.
    pub points: Vec<f64>,
    pub question_count: usize,
}

/// Builds the recall curve of `kind` from one (ranking, gold set) pair per
/// training question.
pub fn recall_curve(
    kind: EntityKind,
    rankings: &[(Vec<TableRef>, BTreeSet<TableRef>)],
    n_max: usize,
) -> Result<RecallCurve, CalibrationError> {
    if n_max == 0 {
        return Err(CalibrationError::InvalidNMax);
    }
    if rankings.is_empty() {
        return Err(CalibrationError::EmptyTraining);
    }
    let mut points = vec![0.0; n_max];
    for (qi, (ranked, gold)) in rankings.iter().enumerate() {
        if gold.is_empty() {
            return Err(CalibrationError::EmptyGold(qi));
        }
        let mut found = BTreeSet::new();
        let mut iter = ranked.iter();
        for point in points.iter_mut() {
            if let Some(t) = iter.next() {
                if gold.contains(t) {
                    found.insert(t);
                }
            }
            *point += found.len() as f64 / gold.len() as f64;
        }
    }
    let n = rankings.len() as f64;
    for p in &mut points {
        *p /= n;
    }
    Ok(RecallCurve {
        kind,
        points,
        question_count: rankings.len(),
    })
}

/// Normalized area under the curve: the mean of its recall points.
pub fn auc(curve: &RecallCurve) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    curve.points.iter().sum::<f64>() / curve.points.len() as f64
}

/// Per-entity-type multipliers applied to raw similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWeights {
    pub version: u32,
    pub n_max: usize,
    pub training_sample_count: usize,
    /// How the curve area was integrated; always `rectangle` (mean of points).
    pub integration: String,
    pub aucs: BTreeMap<EntityKind, f64>,
    pub weights: BTreeMap<EntityKind, f64>,
}

impl Default for CalibrationWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl CalibrationWeights {
    /// Weight 1.0 for every type; used when no training data exists.
    pub fn uniform() -> Self {
        Self {
            version: WEIGHTS_FORMAT_VERSION,
            n_max: DEFAULT_N_MAX,
            training_sample_count: 0,
            integration: "rectangle".to_string(),
            aucs: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }

    /// Weight of `kind`; types absent from the map weigh 1.0. A type whose
    /// training AUC was zero weighs 0.0.
    pub fn weight(&self, kind: EntityKind) -> f64 {
        self.weights.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CalibrationError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let w: CalibrationWeights =
            serde_json::from_str(text).map_err(|e| CalibrationError::Format(e.to_string()))?;
        if w.version != WEIGHTS_FORMAT_VERSION {
            return Err(CalibrationError::Version {
                found: w.version,
                expected: WEIGHTS_FORMAT_VERSION,
            });
        }
        if let Some((k, v)) = w.weights.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(CalibrationError::Format(format!("weight of {k} is {v}")));
        }
        if !w.weights.is_empty() && w.weights.values().all(|v| *v == 0.0) {
            return Err(CalibrationError::Format("every weight is zero".into()));
        }
        Ok(w)
    }
}

/// Squared-AUC weights normalized to sum to the number of types.
pub fn entity_type_weights(
    aucs: &BTreeMap<EntityKind, f64>,
) -> Result<CalibrationWeights, CalibrationError> {
    let total: f64 = aucs.values().map(|a| a * a).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(CalibrationError::Degenerate);
    }
    let n = aucs.len() as f64;
    let weights = aucs
        .iter()
        .map(|(k, a)| (*k, n * a * a / total))
        .collect();
    Ok(CalibrationWeights {
        aucs: aucs.clone(),
        weights,
        ..CalibrationWeights::uniform()
    })
}

/// Multiplies each hit's current calibrated score by its type weight.
///
/// On fresh hits this sets `calibrated = w · raw`; after entropy
/// calibration it composes with the entropy multiplier.
pub fn apply_type_weights(hits: &mut [RetrievalHit], weights: &CalibrationWeights) {
    for h in hits {
        h.calibrated_score *= weights.weight(h.kind);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `softmax(α·s)`, shifted by the maximum for stability.
pub fn softmax(scores: &[f64], alpha: f64) -> Vec<f64> {
    let max = scores
        .iter()
        .map(|s| alpha * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (alpha * s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyGroup {
    pub query_text: String,
    pub kind: EntityKind,
    pub probabilities: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub alpha: f64,
    pub groups: Vec<EntropyGroup>,
    pub mean_entropy: BTreeMap<EntityKind, f64>,
}

/// Damps hits from keywords whose matches are spread evenly over many
/// candidates.
///
/// Hits are grouped by (query, kind). Each group gets a softmax
/// distribution over its raw scores and that distribution's entropy `H`;
/// `H̄` is the mean group entropy of the kind. Every hit is rewritten to
/// `raw · sigmoid(α(H̄ − H))`.
pub fn apply_entropy_calibration(hits: &mut [RetrievalHit], alpha: f64) -> EntropyStats {
    let mut groups: BTreeMap<(String, EntityKind), Vec<usize>> = BTreeMap::new();
    for (i, h) in hits.iter().enumerate() {
        groups
            .entry((h.query_text.clone(), h.kind))
            .or_default()
            .push(i);
    }

    let mut stats = Vec::with_capacity(groups.len());
    let mut sums: BTreeMap<EntityKind, (f64, usize)> = BTreeMap::new();
    for ((query_text, kind), members) in &groups {
        let scores: Vec<f64> = members.iter().map(|&i| hits[i].raw_score).collect();
        let p = softmax(&scores, alpha);
        let h = entropy(&p);
        let s = sums.entry(*kind).or_default();
        s.0 += h;
        s.1 += 1;
        stats.push(EntropyGroup {
            query_text: query_text.clone(),
            kind: *kind,
            probabilities: p,
            entropy: h,
        });
    }
    let mean_entropy: BTreeMap<EntityKind, f64> = sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();

    for (group, members) in stats.iter().zip(groups.values()) {
        let multiplier = sigmoid(alpha * (mean_entropy[&group.kind] - group.entropy));
        for &i in members {
            hits[i].calibrated_score = hits[i].raw_score * multiplier;
        }
    }

    EntropyStats {
        alpha,
        groups: stats,
        mean_entropy,
    }
}
