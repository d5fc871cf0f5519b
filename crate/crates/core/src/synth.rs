//! Synthetic MNAR worlds with known ground-truth propensities.
//!
//! Real data never reveals the true observation probabilities, so the bias
//! and bound guarantees can only be audited on worlds where we control them.
//! Ratings come from a seeded rank-4 latent-factor model; propensities grow
//! with the rating, reproducing user/item selection bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, RatingDataset, RatingEntry, DEFAULT_BINARIZE_THRESHOLD};

/// Lower clamp applied to generated propensities; keeps IPS weights finite.
pub const PROPENSITY_FLOOR: f64 = 0.01;

const LATENT_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("user {user} has only {available} unobserved items, needs {needed} for the MAR test")]
    TooFewMarCandidates {
        user: usize,
        available: usize,
        needed: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// How strongly observation probability grows with the rating.
    pub bias_strength: f64,
    /// Propensity of a mean-rated pair before clamping.
    pub base_rate: f64,
}

/// Full ground truth: dense ratings, propensities, and relevance labels,
/// all row-major `n_users x n_items`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub n_users: usize,
    pub n_items: usize,
    pub true_ratings: Vec<f64>,
    pub true_propensities: Vec<f64>,
    pub relevance: Vec<bool>,
}

impl SyntheticWorld {
    pub fn universe_size(&self) -> usize {
        self.n_users * self.n_items
    }

    pub fn cell(&self, user: usize, item: usize) -> usize {
        user * self.n_items + item
    }
}

/// One Bernoulli draw of the observation indicator matrix O.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorSample {
    pub indicator: Vec<bool>,
}

impl IndicatorSample {
    pub fn observed_count(&self) -> usize {
        self.indicator.iter().filter(|&&o| o).count()
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per pair of uniforms keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates a world: rank-4 latent-factor ratings affinely mapped onto the
/// 1-5 scale, and propensities
/// `clamp(base_rate * exp(bias_strength * (rating - mean_rating)), 0.01, 1)`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld, SynthError> {
    if config.n_users == 0 || config.n_items == 0 {
        return Err(SynthError::InvalidConfig(
            "dimensions must be at least 1".into(),
        ));
    }
    if !(config.base_rate > 0.0 && config.base_rate < 1.0) {
        return Err(SynthError::InvalidConfig(format!(
            "base_rate {} must lie in (0, 1)",
            config.base_rate
        )));
    }
    if !(config.bias_strength >= 0.0) {
        return Err(SynthError::InvalidConfig(format!(
            "bias_strength {} must be nonnegative",
            config.bias_strength
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_factors: Vec<f64> = (0..config.n_users * LATENT_RANK)
        .map(|_| standard_normal(&mut rng))
        .collect();
    let item_factors: Vec<f64> = (0..config.n_items * LATENT_RANK)
        .map(|_| standard_normal(&mut rng))
        .collect();

    let mut true_ratings = Vec::with_capacity(config.n_users * config.n_items);
    for u in 0..config.n_users {
        for i in 0..config.n_items {
            let affinity: f64 = (0..LATENT_RANK)
                .map(|k| user_factors[u * LATENT_RANK + k] * item_factors[i * LATENT_RANK + k])
                .sum();
            let rating = (3.0 + 0.75 * affinity).round().clamp(1.0, 5.0);
            true_ratings.push(rating);
        }
    }
    let mean_rating = true_ratings.iter().sum::<f64>() / true_ratings.len() as f64;
    let true_propensities: Vec<f64> = true_ratings
        .iter()
        .map(|r| {
            (config.base_rate * (config.bias_strength * (r - mean_rating)).exp())
                .clamp(PROPENSITY_FLOOR, 1.0)
        })
        .collect();
    let relevance = true_ratings
        .iter()
        .map(|&r| r >= DEFAULT_BINARIZE_THRESHOLD as f64)
        .collect();

    Ok(SyntheticWorld {
        n_users: config.n_users,
        n_items: config.n_items,
        true_ratings,
        true_propensities,
        relevance,
    })
}

/// Draws each cell's indicator independently with its true propensity.
pub fn sample_indicator(world: &SyntheticWorld, seed: u64) -> IndicatorSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indicator = world
        .true_propensities
        .iter()
        .map(|&p| rng.gen::<f64>() < p)
        .collect();
    IndicatorSample { indicator }
}

/// Materializes the observed cells into a [`RatingDataset`].
pub fn world_to_dataset(
    world: &SyntheticWorld,
    indicator: &IndicatorSample,
) -> Result<RatingDataset, SynthError> {
    assert_eq!(
        indicator.indicator.len(),
        world.universe_size(),
        "indicator shape must match the world"
    );
    let mut entries = Vec::with_capacity(indicator.observed_count());
    for u in 0..world.n_users {
        for i in 0..world.n_items {
            if indicator.indicator[world.cell(u, i)] {
                entries.push(RatingEntry {
                    user: u,
                    item: i,
                    rating: world.true_ratings[world.cell(u, i)] as u8,
                });
            }
        }
    }
    Ok(RatingDataset::new(
        world.n_users,
        world.n_items,
        entries,
        DEFAULT_BINARIZE_THRESHOLD,
    )?)
}

/// Builds a MAR test set: for every user, `items_per_user` items sampled
/// uniformly from the cells the MNAR indicator left unobserved, so the test
/// set stays disjoint from the training data.
pub fn sample_mar_test(
    world: &SyntheticWorld,
    mnar_indicator: &IndicatorSample,
    items_per_user: usize,
    seed: u64,
) -> Result<RatingDataset, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(world.n_users * items_per_user);
    for u in 0..world.n_users {
        let candidates: Vec<usize> = (0..world.n_items)
            .filter(|&i| !mnar_indicator.indicator[world.cell(u, i)])
            .collect();
        if candidates.len() < items_per_user {
            return Err(SynthError::TooFewMarCandidates {
                user: u,
                available: candidates.len(),
                needed: items_per_user,
            });
        }
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), items_per_user);
        let mut items: Vec<usize> = picks.iter().map(|k| candidates[k]).collect();
        items.sort_unstable();
        for i in items {
            entries.push(RatingEntry {
                user: u,
                item: i,
                rating: world.true_ratings[world.cell(u, i)] as u8,
            });
        }
    }
    Ok(RatingDataset::new(
        world.n_users,
        world.n_items,
        entries,
        DEFAULT_BINARIZE_THRESHOLD,
    )?)
}

/// Writes the true propensity matrix as `user,item,propensity` CSV rows.
pub fn write_propensity_csv(world: &SyntheticWorld, path: &std::path::Path) -> std::io::Result<()> {
    let mut out = String::from("user,item,propensity\n");
    for u in 0..world.n_users {
        for i in 0..world.n_items {
            out.push_str(&format!(
                "{u},{i},{:?}\n",
                world.true_propensities[world.cell(u, i)]
            ));
        }
    }
    std::fs::write(path, out)
}
