//! Training the downstream ranking model three ways: unweighted baseline,
//! IPS-weighted, and Doubly-Robust Joint Learning.
//!
//! All arms share one training universe: the observed pairs with their
//! relevance labels (weighted 1/p̂ when propensity scores are supplied) plus
//! uniformly sampled unobserved pairs as unit-weight negatives. DRJL
//! alternates per epoch between an imputation model fitted on the observed
//! pairs (weights 1/p̂) and a prediction model driven by the doubly-robust
//! objective over shuffled batches of that universe; on sampled unobserved
//! pairs the indicator term vanishes and only the imputed error remains.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{sample_unobserved_pairs, DataError, RatingDataset};
use crate::nn::{self, Loss, ModelSpec, NnError, PredictMode, Sample, TrainConfig, TrainOutcome, TrainedModel};
use crate::propensity::PropensityScores;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("propensity scores misaligned with dataset entries ({scores} scores, {entries} entries)")]
    ScoreMismatch { scores: usize, entries: usize },
    #[error("propensity score at index {0} is not positive")]
    NonPositiveScore(usize),
    #[error("negative ratio {0} must be nonnegative")]
    BadNegRatio(f64),
    #[error("non-finite doubly-robust objective in the {phase} phase at epoch {epoch}")]
    Divergence { phase: &'static str, epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One recommender training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecSample {
    pub user: usize,
    pub item: usize,
    /// Relevance for observed pairs; always 0 for sampled negatives.
    pub label: bool,
    /// 1/p̂ for observed pairs, 1 for negatives.
    pub weight: f64,
    pub observed: bool,
    /// Clipped propensity for observed pairs, 1 for negatives.
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecTrainSet {
    pub samples: Vec<RecSample>,
}

impl RecTrainSet {
    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.observed).count()
    }

    pub fn negatives(&self) -> usize {
        self.samples.len() - self.positives()
    }

    fn nn_samples(&self) -> Vec<Sample> {
        self.samples
            .iter()
            .map(|s| Sample {
                user: s.user,
                item: s.item,
                label: s.label as u8 as f64,
            })
            .collect()
    }

    fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight).collect()
    }
}

/// Prediction and imputation models produced by DRJL.
#[derive(Debug, Clone)]
pub struct DrState {
    pub prediction: TrainedModel,
    pub imputation: TrainedModel,
    /// Mean doubly-robust objective per epoch.
    pub objective_per_epoch: Vec<f64>,
}

/// Builds the training universe: observed pairs with weight 1/p̂ (all ones
/// when `scores` is `None`, the unweighted baseline) plus
/// `round(neg_ratio * positives)` sampled unobserved pairs with unit weight.
pub fn build_rec_trainset(
    dataset: &RatingDataset,
    scores: Option<&PropensityScores>,
    neg_ratio: f64,
    seed: u64,
) -> Result<RecTrainSet, RecError> {
    if !(neg_ratio >= 0.0) {
        return Err(RecError::BadNegRatio(neg_ratio));
    }
    if let Some(s) = scores {
        if s.len() != dataset.len() || s.pairs != dataset.pairs() {
            return Err(RecError::ScoreMismatch {
                scores: s.len(),
                entries: dataset.len(),
            });
        }
        if let Some(k) = s.scores.iter().position(|&x| !(x > 0.0)) {
            return Err(RecError::NonPositiveScore(k));
        }
    }

    let mut samples: Vec<RecSample> = dataset
        .entries
        .iter()
        .zip(&dataset.relevance)
        .enumerate()
        .map(|(k, (entry, &rel))| {
            let propensity = scores.map_or(1.0, |s| s.scores[k]);
            RecSample {
                user: entry.user,
                item: entry.item,
                label: rel,
                weight: 1.0 / propensity,
                observed: true,
                propensity,
            }
        })
        .collect();

    let n_negatives = (neg_ratio * dataset.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = sample_unobserved_pairs(
        dataset.n_users,
        dataset.n_items,
        n_negatives,
        &dataset.pair_set(),
        &mut rng,
    )?;
    samples.extend(negatives.into_iter().map(|(user, item)| RecSample {
        user,
        item,
        label: false,
        weight: 1.0,
        observed: false,
        propensity: 1.0,
    }));
    Ok(RecTrainSet { samples })
}

/// Trains the ranking model with per-sample weights taken from the trainset
/// (the IPS objective; with unit weights this is the unweighted baseline).
pub fn train_ips(
    trainset: &RecTrainSet,
    spec: &ModelSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, RecError> {
    let mut config = config.clone();
    config.loss = Loss::Bce;
    config.per_sample_weights = Some(trainset.weights());
    let model = nn::init(spec, derive_seed(seed, 0))?;
    Ok(nn::train(&model, &trainset.nn_samples(), &config, derive_seed(seed, 1))?)
}

fn bce_soft(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(1e-12, 1.0 - 1e-12);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean doubly-robust objective of `prediction` over the trainset, with
/// imputed errors measured against `pseudo_labels` (one per sample).
///
/// Observed pairs contribute `ê + (e - ê)/p̂`, sampled negatives just `ê`,
/// where `e` is the BCE against the sample label and `ê` the BCE against the
/// pseudo-label.
pub fn dr_objective(
    prediction: &TrainedModel,
    trainset: &RecTrainSet,
    pseudo_labels: &[f64],
) -> f64 {
    let pairs: Vec<(usize, usize)> = trainset
        .samples
        .iter()
        .map(|s| (s.user, s.item))
        .collect();
    let probs = nn::predict(prediction, &pairs, PredictMode::Deterministic);
    let total: f64 = trainset
        .samples
        .iter()
        .zip(&probs)
        .zip(pseudo_labels)
        .map(|((s, &prob), &pseudo)| {
            let e_hat = bce_soft(prob, pseudo);
            if s.observed {
                let e = bce_soft(prob, s.label as u8 as f64);
                e_hat + (e - e_hat) / s.propensity
            } else {
                e_hat
            }
        })
        .sum();
    total / trainset.samples.len() as f64
}

/// Doubly-Robust Joint Learning: epoch-wise alternation between fitting the
/// imputation model on observed errors (weights 1/p̂) and one SGD epoch of
/// the prediction model on the doubly-robust objective.
pub fn train_drjl(
    trainset: &RecTrainSet,
    spec: &ModelSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<DrState, RecError> {
    spec.validate()?;
    let mut prediction = nn::init(spec, derive_seed(seed, 0))?;
    let mut imputation = nn::init(spec, derive_seed(seed, 1))?;

    let observed: Vec<&RecSample> = trainset.samples.iter().filter(|s| s.observed).collect();
    let observed_samples: Vec<Sample> = observed
        .iter()
        .map(|s| Sample {
            user: s.user,
            item: s.item,
            label: s.label as u8 as f64,
        })
        .collect();
    let observed_weights: Vec<f64> = observed.iter().map(|s| s.weight).collect();

    let all_pairs: Vec<(usize, usize)> = trainset
        .samples
        .iter()
        .map(|s| (s.user, s.item))
        .collect();

    let layout = nn::Layout::new(spec);
    let mut ws = nn::Workspace::new(&layout);
    let mut grad = vec![0.0; layout.total];
    let mut order: Vec<usize> = (0..trainset.samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut objective_per_epoch = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // (a) one epoch of the imputation model on observed errors.
        let mut imp_config = config.clone();
        imp_config.epochs = 1;
        imp_config.loss = Loss::Bce;
        imp_config.per_sample_weights = Some(observed_weights.clone());
        imputation = nn::train(
            &imputation,
            &observed_samples,
            &imp_config,
            derive_seed(seed, 3 + epoch as u64),
        )
        .map_err(|e| match e {
            NnError::NonFiniteLoss { epoch, .. } => RecError::Divergence {
                phase: "imputation",
                epoch,
            },
            other => RecError::Nn(other),
        })?
        .model;

        // (b) one epoch of the prediction model on the DR objective, with
        // pseudo-labels frozen from the current imputation model.
        let pseudo = nn::predict(&imputation, &all_pairs, PredictMode::Deterministic);
        order.shuffle(&mut rng);
        let mut epoch_objective = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            let mut batch_objective = 0.0;
            for &k in batch {
                let s = &trainset.samples[k];
                nn::forward(
                    &layout,
                    &prediction.parameters,
                    0.0,
                    s.user,
                    s.item,
                    None,
                    &mut ws,
                );
                let prob = ws.prob;
                let e_hat = bce_soft(prob, pseudo[k]);
                let (term, dlogit) = if s.observed {
                    let label = s.label as u8 as f64;
                    let e = bce_soft(prob, label);
                    (
                        e_hat + (e - e_hat) / s.propensity,
                        (prob - pseudo[k]) + ((prob - label) - (prob - pseudo[k])) / s.propensity,
                    )
                } else {
                    (e_hat, prob - pseudo[k])
                };
                batch_objective += term;
                nn::backward(&layout, &prediction.parameters, &mut ws, dlogit, &mut grad);
            }
            if !batch_objective.is_finite() {
                return Err(RecError::Divergence {
                    phase: "prediction",
                    epoch,
                });
            }
            epoch_objective += batch_objective;
            let inv_batch = 1.0 / batch.len() as f64;
            for (p, g) in prediction.parameters.iter_mut().zip(&grad) {
                *p -= config.learning_rate * (g * inv_batch + config.weight_decay * *p);
            }
        }
        objective_per_epoch.push(epoch_objective / trainset.samples.len() as f64);
    }

    prediction.training_seed = seed;
    Ok(DrState {
        prediction,
        imputation,
        objective_per_epoch,
    })
}

/// Deterministic scores for `candidate_items`, sorted descending with ties
/// broken by ascending item index.
pub fn predict_ranking(
    model: &TrainedModel,
    user: usize,
    candidate_items: &[usize],
) -> Vec<(usize, f64)> {
    let pairs: Vec<(usize, usize)> = candidate_items.iter().map(|&i| (user, i)).collect();
    let scores = nn::predict(model, &pairs, PredictMode::Deterministic);
    let mut ranked: Vec<(usize, f64)> = candidate_items
        .iter()
        .copied()
        .zip(scores)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked
}
