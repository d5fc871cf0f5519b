//! Rating datasets, MNAR splits, and observation datasets.
//!
//! Real data arrives in two shapes: the Coat distribution (dense ASCII
//! matrices, one row per user, `0` meaning unobserved) and Yahoo! R3
//! (one `user item rating` triple per line, ids 1-based). Both are loaded
//! into a [`RatingDataset`], binarized at a rating threshold, and split
//! entry-wise into MNAR train/validation plus the MAR test set.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratings at or above this value count as relevant unless overridden.
pub const DEFAULT_BINARIZE_THRESHOLD: u8 = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    RowLength {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: invalid token {token:?}")]
    BadToken {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}:{line}: rating {rating} outside 1-5")]
    RatingRange {
        path: PathBuf,
        line: usize,
        rating: i64,
    },
    #[error("{path}:{line}: duplicate rating for user {user}, item {item}")]
    DuplicateLine {
        path: PathBuf,
        line: usize,
        user: u64,
        item: u64,
    },
    #[error("entry ({user}, {item}) out of bounds for {n_users} users x {n_items} items")]
    OutOfBounds {
        user: usize,
        item: usize,
        n_users: usize,
        n_items: usize,
    },
    #[error("duplicate entry for user {user}, item {item}")]
    DuplicateEntry { user: usize, item: usize },
    #[error("train and test files disagree on shape: {0} vs {1} users")]
    ShapeMismatch(usize, usize),
    #[error("splits overlap at (user {user}, item {item})")]
    SplitOverlap { user: usize, item: usize },
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("need {needed} unobserved pairs for negative sampling, only {available} available")]
    TooFewUnobserved { needed: usize, available: usize },
}

/// One observed rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingEntry {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

/// Sparse user-item ratings with binarized relevance labels.
///
/// The entry list is the observed part of the rating matrix; the universe of
/// pairs has size `n_users * n_items`. `relevance[k]` is true exactly when
/// `entries[k].rating` reached the binarization threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub entries: Vec<RatingEntry>,
    pub relevance: Vec<bool>,
}

impl RatingDataset {
    /// Builds a dataset, validating index bounds and pair uniqueness, and
    /// derives relevance labels from `threshold`.
    pub fn new(
        n_users: usize,
        n_items: usize,
        entries: Vec<RatingEntry>,
        threshold: u8,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.user >= n_users || e.item >= n_items {
                return Err(DataError::OutOfBounds {
                    user: e.user,
                    item: e.item,
                    n_users,
                    n_items,
                });
            }
            if !seen.insert((e.user, e.item)) {
                return Err(DataError::DuplicateEntry {
                    user: e.user,
                    item: e.item,
                });
            }
        }
        let relevance = entries.iter().map(|e| e.rating >= threshold).collect();
        Ok(Self {
            n_users,
            n_items,
            entries,
            relevance,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Size of the full user-item universe `|D|`.
    pub fn universe_size(&self) -> usize {
        self.n_users * self.n_items
    }

    /// Observed (user, item) pairs in entry order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.user, e.item)).collect()
    }

    pub fn pair_set(&self) -> HashSet<(usize, usize)> {
        self.entries.iter().map(|e| (e.user, e.item)).collect()
    }
}

/// Labeled (user, item, observed?) pairs for propensity-classifier training.
///
/// Always balanced: one negative per positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationDataset {
    pub samples: Vec<ObservationSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationSample {
    pub user: usize,
    pub item: usize,
    pub observed: bool,
}

impl ObservationDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.observed).count()
    }
}

/// MNAR train/validation splits plus the MAR test set.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: RatingDataset,
    pub validation: RatingDataset,
    pub test: RatingDataset,
}

impl SplitPair {
    /// Validates that test is disjoint from train and validation (train and
    /// validation come out of [`split_mnar`], which already partitions).
    pub fn new(
        train: RatingDataset,
        validation: RatingDataset,
        test: RatingDataset,
    ) -> Result<Self, DataError> {
        let mut mnar = train.pair_set();
        mnar.extend(validation.pair_set());
        for e in &test.entries {
            if mnar.contains(&(e.user, e.item)) {
                return Err(DataError::SplitOverlap {
                    user: e.user,
                    item: e.item,
                });
            }
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }
}

/// Options shared by the dataset loaders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadConfig {
    pub threshold: u8,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_BINARIZE_THRESHOLD,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Reads a Coat-format dense ASCII matrix: one row per user, whitespace
/// separated, `0` meaning unobserved, `1..=5` a rating.
pub fn read_coat_matrix(path: &Path, threshold: u8) -> Result<RatingDataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    let mut n_items = None;
    let mut n_users = 0;
    for (line_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split_whitespace().collect();
        let expected = *n_items.get_or_insert(row.len());
        if row.len() != expected {
            return Err(DataError::RowLength {
                path: path.to_path_buf(),
                line: line_idx + 1,
                expected,
                found: row.len(),
            });
        }
        for (item, token) in row.iter().enumerate() {
            let value: i64 = token.parse().map_err(|_| DataError::BadToken {
                path: path.to_path_buf(),
                line: line_idx + 1,
                token: (*token).to_string(),
            })?;
            match value {
                0 => {}
                1..=5 => entries.push(RatingEntry {
                    user: n_users,
                    item,
                    rating: value as u8,
                }),
                _ => {
                    return Err(DataError::RatingRange {
                        path: path.to_path_buf(),
                        line: line_idx + 1,
                        rating: value,
                    })
                }
            }
        }
        n_users += 1;
    }
    RatingDataset::new(n_users, n_items.unwrap_or(0), entries, threshold)
}

/// Writes a dataset back out in the Coat dense ASCII layout.
pub fn write_coat_matrix(dataset: &RatingDataset, path: &Path) -> Result<(), DataError> {
    let mut grid = vec![0u8; dataset.n_users * dataset.n_items];
    for e in &dataset.entries {
        grid[e.user * dataset.n_items + e.item] = e.rating;
    }
    let mut out = String::with_capacity(grid.len() * 2);
    for u in 0..dataset.n_users {
        let row = &grid[u * dataset.n_items..(u + 1) * dataset.n_items];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the Coat distribution: `train.ascii` (MNAR, split 90/10 into
/// train/validation) and `test.ascii` (MAR test set).
pub fn load_coat(dir: &Path, config: &LoadConfig) -> Result<SplitPair, DataError> {
    let mnar = read_coat_matrix(&dir.join("train.ascii"), config.threshold)?;
    let mar = read_coat_matrix(&dir.join("test.ascii"), config.threshold)?;
    if mnar.n_users != mar.n_users || mnar.n_items != mar.n_items {
        return Err(DataError::ShapeMismatch(mnar.n_users, mar.n_users));
    }
    let (train, validation) = split_mnar(&mnar, config.train_fraction, config.seed)?;
    SplitPair::new(train, validation, mar)
}

/// Dense-index remap produced by the Yahoo loader: `map[dense] = original_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    pub originals: Vec<u64>,
}

impl IdMap {
    /// Writes the sidecar format: one `original_id dense_index` line per id.
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (dense, original) in self.originals.iter().enumerate() {
            out.push_str(&format!("{original} {dense}\n"));
        }
        fs::write(path, out).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A loaded Yahoo! R3 dataset plus the id remapping sidecars.
#[derive(Debug, Clone)]
pub struct YahooData {
    pub splits: SplitPair,
    pub user_map: IdMap,
    pub item_map: IdMap,
}

/// Loads Yahoo! R3: a `*train.txt` file of MNAR triples and a `*test.txt`
/// file of MAR triples, tab- or comma-separated, ids 1-based.
pub fn load_yahoo(dir: &Path, config: &LoadConfig) -> Result<YahooData, DataError> {
    let train_path = find_by_suffix(dir, "train.txt")?;
    let test_path = find_by_suffix(dir, "test.txt")?;

    let mut users: Vec<u64> = Vec::new();
    let mut items: Vec<u64> = Vec::new();
    let mut user_idx = std::collections::HashMap::new();
    let mut item_idx = std::collections::HashMap::new();
    let intern = |id: u64, table: &mut std::collections::HashMap<u64, usize>,
                  order: &mut Vec<u64>| {
        *table.entry(id).or_insert_with(|| {
            order.push(id);
            order.len() - 1
        })
    };

    let mut read_triples = |path: &Path| -> Result<Vec<RatingEntry>, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (line_idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line
                .split(['\t', ',', ' '])
                .filter(|t| !t.is_empty())
                .collect();
            if fields.len() != 3 {
                return Err(DataError::BadToken {
                    path: path.to_path_buf(),
                    line: line_idx + 1,
                    token: line.to_string(),
                });
            }
            let parse = |token: &str| -> Result<u64, DataError> {
                token.parse().map_err(|_| DataError::BadToken {
                    path: path.to_path_buf(),
                    line: line_idx + 1,
                    token: token.to_string(),
                })
            };
            let (user_id, item_id) = (parse(fields[0])?, parse(fields[1])?);
            let rating: i64 = fields[2].parse().map_err(|_| DataError::BadToken {
                path: path.to_path_buf(),
                line: line_idx + 1,
                token: fields[2].to_string(),
            })?;
            if !(1..=5).contains(&rating) {
                return Err(DataError::RatingRange {
                    path: path.to_path_buf(),
                    line: line_idx + 1,
                    rating,
                });
            }
            if !seen.insert((user_id, item_id)) {
                return Err(DataError::DuplicateLine {
                    path: path.to_path_buf(),
                    line: line_idx + 1,
                    user: user_id,
                    item: item_id,
                });
            }
            entries.push(RatingEntry {
                user: intern(user_id, &mut user_idx, &mut users),
                item: intern(item_id, &mut item_idx, &mut items),
                rating: rating as u8,
            });
        }
        Ok(entries)
    };

    let mnar_entries = read_triples(&train_path)?;
    let mar_entries = read_triples(&test_path)?;
    let (n_users, n_items) = (users.len(), items.len());

    let mnar = RatingDataset::new(n_users, n_items, mnar_entries, config.threshold)?;
    let mar = RatingDataset::new(n_users, n_items, mar_entries, config.threshold)?;
    let (train, validation) = split_mnar(&mnar, config.train_fraction, config.seed)?;
    Ok(YahooData {
        splits: SplitPair::new(train, validation, mar)?,
        user_map: IdMap { originals: users },
        item_map: IdMap { originals: items },
    })
}

fn find_by_suffix(dir: &Path, suffix: &str) -> Result<PathBuf, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut candidates: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(suffix))
        })
        .collect();
    candidates.sort();
    candidates.into_iter().next().ok_or_else(|| DataError::Io {
        path: dir.join(format!("*{suffix}")),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no matching file"),
    })
}

/// Recomputes relevance labels at `threshold`; ratings are preserved.
pub fn binarize(dataset: &RatingDataset, threshold: u8) -> RatingDataset {
    let mut out = dataset.clone();
    out.relevance = out.entries.iter().map(|e| e.rating >= threshold).collect();
    out
}

/// Entry-level uniform split of the MNAR ratings.
///
/// The train side gets `floor(n * fraction)` entries; deterministic per seed.
pub fn split_mnar(
    dataset: &RatingDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset), DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let n = dataset.len();
    // The epsilon keeps exact products like 10 * 0.3 from flooring to 2.
    let train_size = ((n as f64) * train_fraction + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let take = |indices: &[usize]| -> RatingDataset {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        RatingDataset {
            n_users: dataset.n_users,
            n_items: dataset.n_items,
            entries: sorted.iter().map(|&k| dataset.entries[k]).collect(),
            relevance: sorted.iter().map(|&k| dataset.relevance[k]).collect(),
        }
    };
    Ok((take(&order[..train_size]), take(&order[train_size..])))
}

/// Samples `n` distinct unobserved pairs uniformly, excluding `excluded`.
///
/// Rejection sampling; uniform without replacement and deterministic for a
/// fixed RNG state.
pub(crate) fn sample_unobserved_pairs(
    n_users: usize,
    n_items: usize,
    n: usize,
    excluded: &HashSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, DataError> {
    let universe = n_users * n_items;
    let available = universe - excluded.len();
    if n > available {
        return Err(DataError::TooFewUnobserved {
            needed: n,
            available,
        });
    }
    let mut chosen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let user = rng.gen_range(0..n_users);
        let item = rng.gen_range(0..n_items);
        let pair = (user, item);
        if !excluded.contains(&pair) && chosen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Builds the balanced observation dataset: every observed pair as a
/// positive, an equal number of uniformly sampled unobserved pairs as
/// negatives.
pub fn build_observation_dataset(
    dataset: &RatingDataset,
    seed: u64,
) -> Result<ObservationDataset, DataError> {
    build_observation_dataset_excluding(dataset, &HashSet::new(), seed)
}

/// Like [`build_observation_dataset`] but keeps `extra_excluded` pairs out of
/// the negative pool as well (used when other splits' entries exist and must
/// not be mislabeled as unobserved).
pub fn build_observation_dataset_excluding(
    dataset: &RatingDataset,
    extra_excluded: &HashSet<(usize, usize)>,
    seed: u64,
) -> Result<ObservationDataset, DataError> {
    let mut excluded = dataset.pair_set();
    excluded.extend(extra_excluded.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = sample_unobserved_pairs(
        dataset.n_users,
        dataset.n_items,
        dataset.len(),
        &excluded,
        &mut rng,
    )?;
    let mut samples: Vec<ObservationSample> = dataset
        .entries
        .iter()
        .map(|e| ObservationSample {
            user: e.user,
            item: e.item,
            observed: true,
        })
        .collect();
    samples.extend(negatives.into_iter().map(|(user, item)| ObservationSample {
        user,
        item,
        observed: false,
    }));
    Ok(ObservationDataset { samples })
}
