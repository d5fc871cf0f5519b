//! The binary observation classifier and its raw propensity scores.
//!
//! The classifier f is trained on the balanced observation dataset and its
//! deterministic outputs on the observed pairs are the raw propensity
//! scores p̂. A floor clip keeps the IPS weights (and the bound's variance
//! term, which scales with 1/p̂²) finite.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ObservationDataset, RatingDataset};
use crate::nn::{self, ModelSpec, NnError, PredictMode, Sample, TrainConfig, TrainOutcome, TrainedModel};

/// Default lower clip for propensity scores used as IPS weights.
pub const DEFAULT_FLOOR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("observation dataset is not balanced: {positives} positives, {negatives} negatives")]
    Imbalanced { positives: usize, negatives: usize },
    #[error("clip floor {0} must lie in (0, 0.5)")]
    BadFloor(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("cannot write scores to {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How a score vector was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    Platt,
    McDropout,
    Ensemble,
}

impl std::fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CalibrationMethod::Platt => write!(f, "platt"),
            CalibrationMethod::McDropout => write!(f, "mc-dropout"),
            CalibrationMethod::Ensemble => write!(f, "ensemble"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    Raw,
    Calibrated(CalibrationMethod),
}

/// Propensity scores aligned with a pair list.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityScores {
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
}

impl PropensityScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Converts observation samples into training samples for the classifier.
pub fn observation_samples(obs: &ObservationDataset) -> Vec<Sample> {
    obs.samples
        .iter()
        .map(|s| Sample {
            user: s.user,
            item: s.item,
            label: s.observed as u8 as f64,
        })
        .collect()
}

/// Trains f on the balanced observation dataset with BCE loss.
pub fn train_propensity(
    obs: &ObservationDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, PropensityError> {
    let positives = obs.positives();
    let negatives = obs.len() - positives;
    if positives != negatives {
        return Err(PropensityError::Imbalanced {
            positives,
            negatives,
        });
    }
    let mut config = config.clone();
    config.loss = nn::Loss::Bce;
    let model = nn::init(spec, seed)?;
    Ok(nn::train(&model, &observation_samples(obs), &config, seed)?)
}

/// Deterministic-mode scores for exactly the observed pairs, in entry order.
pub fn score_observed(model: &TrainedModel, dataset: &RatingDataset) -> PropensityScores {
    score_pairs(model, dataset.pairs())
}

/// Deterministic-mode scores for an arbitrary pair list.
pub fn score_pairs(model: &TrainedModel, pairs: Vec<(usize, usize)>) -> PropensityScores {
    let scores = nn::predict(model, &pairs, PredictMode::Deterministic);
    PropensityScores {
        pairs,
        scores,
        kind: ScoreKind::Raw,
    }
}

/// Replaces every score below `floor` by `floor`; idempotent and
/// order-preserving on unclipped entries.
pub fn clip_floor(scores: &PropensityScores, floor: f64) -> Result<PropensityScores, PropensityError> {
    if !(floor > 0.0 && floor < 0.5) {
        return Err(PropensityError::BadFloor(floor));
    }
    Ok(PropensityScores {
        pairs: scores.pairs.clone(),
        scores: scores.scores.iter().map(|&s| s.max(floor)).collect(),
        kind: scores.kind,
    })
}

/// Writes `user,item,raw_score,calibrated_score` rows. The calibrated column
/// stays empty when no calibrated scores are supplied.
pub fn write_scores_csv(
    raw: &PropensityScores,
    calibrated: Option<&PropensityScores>,
    path: &Path,
) -> Result<(), PropensityError> {
    let mut out = String::from("user,item,raw_score,calibrated_score\n");
    for (k, &(user, item)) in raw.pairs.iter().enumerate() {
        let cal = calibrated.map_or(String::new(), |c| format!("{:?}", c.scores[k]));
        out.push_str(&format!("{user},{item},{:?},{cal}\n", raw.scores[k]));
    }
    std::fs::write(path, out).map_err(|source| PropensityError::Io {
        path: path.to_path_buf(),
        source,
    })
}
