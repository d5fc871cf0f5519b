//! Probability calibration for propensity scores.
//!
//! Three methods: Platt scaling (a sigmoid of an affine map of the score's
//! logit, fitted by Newton iteration on the convex cross-entropy), MC-Dropout
//! averaging (T dropout-active passes), and deep-ensemble averaging (T
//! independently trained members). Miscalibration is quantified by the
//! expected calibration error over equal-width probability bins, and
//! reliability curves / score histograms are exportable as CSV.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ObservationDataset;
use crate::nn::{self, ModelSpec, PredictMode, TrainConfig, TrainedModel};
use crate::propensity::{
    train_propensity, CalibrationMethod, PropensityError, PropensityScores, ScoreKind,
};
use crate::seed::derive_seed;

/// Scores are nudged into [EPS, 1-EPS] before taking logits.
const LOGIT_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("scores and labels are empty")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    Misaligned { scores: usize, labels: usize },
    #[error("n_bins must be >= 1")]
    NoBins,
    #[error("platt fit needs both classes present in the labels")]
    SingleClass,
    #[error("platt fit did not converge: gradient norm {grad_norm} after {iterations} iterations")]
    DidNotConverge { grad_norm: f64, iterations: usize },
    #[error("mc-dropout averaging needs dropout_rate > 0")]
    DropoutDisabled,
    #[error("averaging needs at least 2 passes or members, got {0}")]
    TooFewMembers(usize),
    #[error("ensemble members must share one spec")]
    MixedSpecs,
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Platt parameters: calibrated score = sigmoid(b * logit(score) + c).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub b: f64,
    pub c: f64,
}

/// Independently trained model replicas aggregated by elementwise mean.
#[derive(Debug, Clone)]
pub struct EnsembleScorer {
    members: Vec<TrainedModel>,
}

impl EnsembleScorer {
    pub fn new(members: Vec<TrainedModel>) -> Result<Self, CalibError> {
        if members.len() < 2 {
            return Err(CalibError::TooFewMembers(members.len()));
        }
        if members.windows(2).any(|w| w[0].spec != w[1].spec) {
            return Err(CalibError::MixedSpecs);
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[TrainedModel] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// One reliability-diagram bin; `expected`/`empirical` are `None` when the
/// bin holds no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub expected: Option<f64>,
    pub empirical: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityCurve {
    /// CSV rows `bin_lo,bin_hi,expected,empirical,count`; empty bins keep
    /// empty expected/empirical fields.
    pub fn write_csv(&self, path: &Path) -> Result<(), CalibError> {
        let mut out = String::from("bin_lo,bin_hi,expected,empirical,count\n");
        for b in &self.bins {
            let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
            out.push_str(&format!(
                "{:?},{:?},{},{},{}\n",
                b.lo,
                b.hi,
                fmt(b.expected),
                fmt(b.empirical),
                b.count
            ));
        }
        std::fs::write(path, out).map_err(|source| CalibError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn bin_index(score: f64, n_bins: usize) -> usize {
    ((score.max(0.0) * n_bins as f64) as usize).min(n_bins - 1)
}

struct BinStats {
    score_sum: Vec<f64>,
    label_sum: Vec<f64>,
    count: Vec<usize>,
}

fn bin_stats(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<BinStats, CalibError> {
    if scores.len() != labels.len() {
        return Err(CalibError::Misaligned {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(CalibError::Empty);
    }
    if n_bins == 0 {
        return Err(CalibError::NoBins);
    }
    let mut stats = BinStats {
        score_sum: vec![0.0; n_bins],
        label_sum: vec![0.0; n_bins],
        count: vec![0; n_bins],
    };
    for (&s, &y) in scores.iter().zip(labels) {
        let j = bin_index(s, n_bins);
        stats.score_sum[j] += s;
        stats.label_sum[j] += y as u8 as f64;
        stats.count[j] += 1;
    }
    Ok(stats)
}

/// Expected calibration error over `n_bins` equal-width bins on [0, 1]:
/// the mean over all bins of |mean score - positive fraction|, empty bins
/// contributing zero but still counting in the divisor.
pub fn ece(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<f64, CalibError> {
    let stats = bin_stats(scores, labels, n_bins)?;
    let total: f64 = (0..n_bins)
        .filter(|&j| stats.count[j] > 0)
        .map(|j| {
            let n = stats.count[j] as f64;
            (stats.score_sum[j] / n - stats.label_sum[j] / n).abs()
        })
        .sum();
    Ok(total / n_bins as f64)
}

/// Count-weighted ECE variant: Σ (B_j / N) |ξ_j - ξ̂_j|. Exposed behind a
/// flag, never the default.
pub fn ece_count_weighted(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<f64, CalibError> {
    let stats = bin_stats(scores, labels, n_bins)?;
    let n_total = scores.len() as f64;
    let total: f64 = (0..n_bins)
        .filter(|&j| stats.count[j] > 0)
        .map(|j| {
            let n = stats.count[j] as f64;
            (n / n_total) * (stats.score_sum[j] / n - stats.label_sum[j] / n).abs()
        })
        .sum();
    Ok(total)
}

/// Per-bin (expected confidence, empirical fraction, count) triples with the
/// same binning as [`ece`].
pub fn reliability_curve(
    scores: &[f64],
    labels: &[bool],
    n_bins: usize,
) -> Result<ReliabilityCurve, CalibError> {
    let stats = bin_stats(scores, labels, n_bins)?;
    let width = 1.0 / n_bins as f64;
    let bins = (0..n_bins)
        .map(|j| {
            let count = stats.count[j];
            let (expected, empirical) = if count > 0 {
                let n = count as f64;
                (
                    Some(stats.score_sum[j] / n),
                    Some(stats.label_sum[j] / n),
                )
            } else {
                (None, None)
            };
            ReliabilityBin {
                lo: j as f64 * width,
                hi: if j + 1 == n_bins {
                    1.0
                } else {
                    (j + 1) as f64 * width
                },
                expected,
                empirical,
                count,
            }
        })
        .collect();
    Ok(ReliabilityCurve { bins })
}

/// Score histogram over `n_bins` equal-width bins.
pub fn histogram(scores: &[f64], n_bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_bins.max(1)];
    for &s in scores {
        counts[bin_index(s, n_bins.max(1))] += 1;
    }
    counts
}

/// CSV rows `bin_lo,bin_hi,count`.
pub fn write_histogram_csv(scores: &[f64], n_bins: usize, path: &Path) -> Result<(), CalibError> {
    let counts = histogram(scores, n_bins);
    let width = 1.0 / counts.len() as f64;
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (j, c) in counts.iter().enumerate() {
        let hi = if j + 1 == counts.len() {
            1.0
        } else {
            (j + 1) as f64 * width
        };
        out.push_str(&format!("{:?},{:?},{}\n", j as f64 * width, hi, c));
    }
    std::fs::write(path, out).map_err(|source| CalibError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn logit(score: f64) -> f64 {
    let s = score.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (s / (1.0 - s)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn platt_objective(logits: &[f64], labels: &[bool], b: f64, c: f64) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let p = sigmoid(b * l + c).clamp(1e-12, 1.0 - 1e-12);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Fits (b, c) by Newton iteration from a caller-chosen start point.
///
/// The cross-entropy is convex in (b, c), so any start point converges to
/// the same optimum within tolerance.
pub fn platt_fit_from(
    scores: &[f64],
    labels: &[bool],
    tolerance: f64,
    start: PlattParams,
) -> Result<PlattParams, CalibError> {
    if scores.len() != labels.len() {
        return Err(CalibError::Misaligned {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(CalibError::Empty);
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(CalibError::SingleClass);
    }

    let logits: Vec<f64> = scores.iter().map(|&s| logit(s)).collect();
    let n = logits.len() as f64;
    let (mut b, mut c) = (start.b, start.c);
    let max_iterations = 200;

    for _ in 0..max_iterations {
        let mut g = [0.0f64; 2];
        let mut h = [0.0f64; 3]; // [h_bb, h_bc, h_cc]
        for (&l, &y) in logits.iter().zip(labels) {
            let p = sigmoid(b * l + c);
            let r = p - y as u8 as f64;
            g[0] += r * l;
            g[1] += r;
            let v = p * (1.0 - p);
            h[0] += v * l * l;
            h[1] += v * l;
            h[2] += v;
        }
        g[0] /= n;
        g[1] /= n;
        h[0] /= n;
        h[1] /= n;
        h[2] /= n;

        let grad_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if grad_norm < tolerance {
            if b <= 0.0 {
                log::warn!("platt fit produced non-positive slope b = {b}");
            }
            return Ok(PlattParams { b, c });
        }

        // Regularized 2x2 Newton step with backtracking.
        let det = (h[0] + 1e-12) * (h[2] + 1e-12) - h[1] * h[1];
        let (db, dc) = if det.abs() > 1e-300 {
            (
                -((h[2] + 1e-12) * g[0] - h[1] * g[1]) / det,
                -(-h[1] * g[0] + (h[0] + 1e-12) * g[1]) / det,
            )
        } else {
            (-g[0], -g[1])
        };
        let current = platt_objective(&logits, labels, b, c);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (nb, nc) = (b + step * db, c + step * dc);
            if platt_objective(&logits, labels, nb, nc) <= current {
                b = nb;
                c = nc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(CalibError::DidNotConverge {
                grad_norm,
                iterations: max_iterations,
            });
        }
    }

    // Report the final gradient norm.
    let mut g = [0.0f64; 2];
    for (&l, &y) in logits.iter().zip(labels) {
        let r = sigmoid(b * l + c) - y as u8 as f64;
        g[0] += r * l;
        g[1] += r;
    }
    Err(CalibError::DidNotConverge {
        grad_norm: (g[0] * g[0] + g[1] * g[1]).sqrt() / n,
        iterations: max_iterations,
    })
}

/// Fits Platt parameters on raw probability scores: minimizes the mean
/// cross-entropy of `sigmoid(b * logit(score) + c)` to gradient norm below
/// `tolerance`.
pub fn platt_fit(scores: &[f64], labels: &[bool], tolerance: f64) -> Result<PlattParams, CalibError> {
    platt_fit_from(scores, labels, tolerance, PlattParams { b: 1.0, c: 0.0 })
}

/// Applies `sigmoid(b * logit(score) + c)` elementwise.
pub fn platt_apply(params: &PlattParams, scores: &[f64]) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| sigmoid(params.b * logit(s) + params.c))
        .collect()
}

/// Platt-calibrates a score vector, tagging the result.
pub fn calibrate_scores(params: &PlattParams, scores: &PropensityScores) -> PropensityScores {
    PropensityScores {
        pairs: scores.pairs.clone(),
        scores: platt_apply(params, &scores.scores),
        kind: ScoreKind::Calibrated(CalibrationMethod::Platt),
    }
}

/// MC-Dropout scores: the elementwise mean of `t` dropout-active passes,
/// pass `k` seeded with `derive_seed(seed, k)`.
pub fn mc_dropout_scores(
    model: &TrainedModel,
    pairs: &[(usize, usize)],
    t: usize,
    seed: u64,
) -> Result<PropensityScores, CalibError> {
    if model.spec.dropout_rate == 0.0 {
        return Err(CalibError::DropoutDisabled);
    }
    if t < 2 {
        return Err(CalibError::TooFewMembers(t));
    }
    Ok(PropensityScores {
        pairs: pairs.to_vec(),
        scores: average_passes(model, pairs, t, seed),
        kind: ScoreKind::Calibrated(CalibrationMethod::McDropout),
    })
}

pub(crate) fn average_passes(
    model: &TrainedModel,
    pairs: &[(usize, usize)],
    t: usize,
    seed: u64,
) -> Vec<f64> {
    let mut mean = vec![0.0; pairs.len()];
    for k in 0..t {
        let pass = nn::predict(
            model,
            pairs,
            PredictMode::DropoutActive {
                seed: derive_seed(seed, k as u64),
            },
        );
        for (m, p) in mean.iter_mut().zip(pass) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    mean
}

/// Elementwise mean of the members' deterministic predictions.
pub fn ensemble_scores(ensemble: &EnsembleScorer, pairs: &[(usize, usize)]) -> PropensityScores {
    let mut mean = vec![0.0; pairs.len()];
    for member in ensemble.members() {
        let pass = nn::predict(member, pairs, PredictMode::Deterministic);
        for (m, p) in mean.iter_mut().zip(pass) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ensemble.size() as f64);
    PropensityScores {
        pairs: pairs.to_vec(),
        scores: mean,
        kind: ScoreKind::Calibrated(CalibrationMethod::Ensemble),
    }
}

/// Trains `t` ensemble members, member `i` using `derive_seed(seed, i)` for
/// both initialization and data shuffling. Members train in parallel; the
/// fixed member indexing keeps the result schedule-independent.
pub fn train_ensemble(
    obs: &ObservationDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    t: usize,
    seed: u64,
) -> Result<EnsembleScorer, CalibError> {
    if t < 2 {
        return Err(CalibError::TooFewMembers(t));
    }
    let members: Vec<TrainedModel> = (0..t)
        .into_par_iter()
        .map(|i| {
            train_propensity(obs, spec, config, derive_seed(seed, i as u64))
                .map(|outcome| outcome.model)
        })
        .collect::<Result<_, _>>()?;
    EnsembleScorer::new(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ece_point_mass_perfectly_calibrated() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        assert_eq!(ece(&scores, &labels, 1).unwrap(), 0.0);
    }

    #[test]
    fn ece_single_bin_hand_value() {
        let scores = [0.9, 0.9];
        let labels = [true, false];
        let e = ece(&scores, &labels, 1).unwrap();
        assert!((e - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ece_of_calibrated_synthetic_scores_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.gen::<f64>() < s).collect();
        let e = ece(&scores, &labels, 100).unwrap();
        assert!(e < 0.03, "ECE {e}");
    }

    #[test]
    fn ece_permutation_invariant_and_errors() {
        let scores = vec![0.2, 0.7, 0.9, 0.4];
        let labels = vec![false, true, true, false];
        let e1 = ece(&scores, &labels, 10).unwrap();
        let perm = [2usize, 0, 3, 1];
        let ps: Vec<f64> = perm.iter().map(|&k| scores[k]).collect();
        let pl: Vec<bool> = perm.iter().map(|&k| labels[k]).collect();
        assert_eq!(e1, ece(&ps, &pl, 10).unwrap());

        assert!(matches!(ece(&[], &[], 5), Err(CalibError::Empty)));
        assert!(matches!(
            ece(&[0.5], &[true, false], 5),
            Err(CalibError::Misaligned { .. })
        ));
        assert!(matches!(ece(&[0.5], &[true], 0), Err(CalibError::NoBins)));
    }

    #[test]
    fn ece_zero_when_bins_internally_calibrated() {
        // Two bins, each with mean score equal to its positive fraction.
        let scores = [0.2, 0.2, 0.2, 0.2, 0.2, 0.8, 0.8, 0.8, 0.8, 0.8];
        let labels = [
            true, false, false, false, false, // 1/5 = 0.2
            true, true, true, true, false, // 4/5 = 0.8
        ];
        assert_eq!(ece(&scores, &labels, 2).unwrap(), 0.0);
    }

    #[test]
    fn reliability_curve_single_bin_is_mean_and_base_rate() {
        let scores = [0.3, 0.6, 0.9];
        let labels = [true, false, true];
        let curve = reliability_curve(&scores, &labels, 1).unwrap();
        assert_eq!(curve.bins.len(), 1);
        let bin = &curve.bins[0];
        assert!((bin.expected.unwrap() - 0.6).abs() < 1e-15);
        assert!((bin.empirical.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bin.count, 3);
    }

    #[test]
    fn reliability_curve_counts_sum_to_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.gen::<f64>() < s).collect();
        let curve = reliability_curve(&scores, &labels, 17).unwrap();
        let total: usize = curve.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 500);
    }

    #[test]
    fn reliability_curve_calibrated_bins_track_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.gen::<f64>() < s).collect();
        let curve = reliability_curve(&scores, &labels, 10).unwrap();
        for bin in &curve.bins {
            assert!(bin.count >= 1000, "bin {bin:?} too small");
            let gap = (bin.expected.unwrap() - bin.empirical.unwrap()).abs();
            assert!(gap < 0.05, "bin gap {gap}");
        }
    }

    #[test]
    fn platt_identity_and_saturation() {
        let scores = vec![0.1, 0.35, 0.5, 0.82, 0.99];
        let id = PlattParams { b: 1.0, c: 0.0 };
        for (cal, raw) in platt_apply(&id, &scores).iter().zip(&scores) {
            assert!((cal - raw).abs() < 1e-9, "{cal} vs {raw}");
        }
        let saturated = PlattParams { b: 1.0, c: 20.0 };
        assert!(platt_apply(&saturated, &[0.5])[0] > 0.999);
        let steep = PlattParams { b: 2.0, c: 0.0 };
        assert!((platt_apply(&steep, &[0.5])[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn platt_fit_recovers_identity_on_calibrated_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.gen::<f64>() < s).collect();
        let params = platt_fit(&scores, &labels, 1e-8).unwrap();
        assert!((params.b - 1.0).abs() < 0.1, "b = {}", params.b);
        assert!(params.c.abs() < 0.1, "c = {}", params.c);
    }

    #[test]
    fn platt_fit_constant_scores_learns_base_rate() {
        let n = 2_000;
        let scores = vec![0.5; n];
        let labels: Vec<bool> = (0..n).map(|k| k % 4 == 0).collect(); // base rate 0.25
        let params = platt_fit(&scores, &labels, 1e-10).unwrap();
        let out = platt_apply(&params, &[0.5, 0.5])[0];
        assert!((out - 0.25).abs() < 1e-6, "constant prediction {out}");
    }

    #[test]
    fn platt_fit_preserves_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.gen::<f64>() < s * 0.7).collect();
        let params = platt_fit(&scores, &labels, 1e-8).unwrap();
        assert!(params.b > 0.0);
        let cal = platt_apply(&params, &scores);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let mut cal_order = order.clone();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        cal_order.sort_by(|&a, &b| cal[a].partial_cmp(&cal[b]).unwrap());
        assert_eq!(order, cal_order);
    }

    #[test]
    fn platt_fit_restarts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..5_000).map(|_| rng.gen_range(0.05..0.95)).collect();
        let labels: Vec<bool> = scores
            .iter()
            .map(|&s| rng.gen::<f64>() < sigmoid(2.0 * logit(s) - 0.5))
            .collect();
        let tolerance = 1e-9;
        let reference = platt_fit(&scores, &labels, tolerance).unwrap();
        for start in [
            PlattParams { b: 0.1, c: 2.0 },
            PlattParams { b: 3.0, c: -1.0 },
            PlattParams { b: 0.5, c: 0.5 },
            PlattParams { b: 2.0, c: 1.0 },
            PlattParams { b: -0.5, c: 0.0 },
        ] {
            let fit = platt_fit_from(&scores, &labels, tolerance, start).unwrap();
            assert!((fit.b - reference.b).abs() < 10.0 * tolerance.sqrt());
            assert!((fit.c - reference.c).abs() < 10.0 * tolerance.sqrt());
        }
    }

    #[test]
    fn platt_fit_single_class_errors() {
        assert!(matches!(
            platt_fit(&[0.2, 0.4], &[true, true], 1e-6),
            Err(CalibError::SingleClass)
        ));
    }

    fn dropout_model() -> TrainedModel {
        let spec = ModelSpec {
            n_users: 4,
            n_items: 4,
            embedding_dim: 4,
            mlp_layers: vec![8, 1],
            dropout_rate: 0.3,
        };
        nn::init(&spec, 21).unwrap()
    }

    #[test]
    fn mc_dropout_guards() {
        let mut model = dropout_model();
        let pairs = vec![(0, 0)];
        assert!(mc_dropout_scores(&model, &pairs, 1, 0).is_err());
        model.spec.dropout_rate = 0.0;
        assert!(matches!(
            mc_dropout_scores(&model, &pairs, 10, 0),
            Err(CalibError::DropoutDisabled)
        ));
    }

    #[test]
    fn mc_dropout_with_zero_rate_equals_deterministic() {
        // Bypasses the guard: with dropout 0 every pass is the plain forward
        // pass, so the average collapses to the deterministic prediction.
        let mut model = dropout_model();
        model.spec.dropout_rate = 0.0;
        let pairs = vec![(0, 1), (2, 3)];
        let avg = average_passes(&model, &pairs, 5, 9);
        let det = nn::predict(&model, &pairs, PredictMode::Deterministic);
        for (a, d) in avg.iter().zip(&det) {
            assert!((a - d).abs() < 1e-15);
        }
    }

    #[test]
    fn mc_dropout_deterministic_and_variance_shrinks() {
        let model = dropout_model();
        let pairs = vec![(0, 1), (1, 2), (3, 0)];
        let a = mc_dropout_scores(&model, &pairs, 10, 3).unwrap();
        let b = mc_dropout_scores(&model, &pairs, 10, 3).unwrap();
        assert_eq!(a, b);

        // Variance of a T-pass mean across seeds should be ~1/T of the
        // single-pass variance.
        let var_of = |t: usize| {
            let samples: Vec<f64> = (0..300)
                .map(|s| {
                    if t == 1 {
                        nn::predict(&model, &pairs[..1], PredictMode::DropoutActive { seed: s })[0]
                    } else {
                        average_passes(&model, &pairs[..1], t, s)[0]
                    }
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
        };
        let single = var_of(1);
        let ten = var_of(10);
        assert!(
            ten < single / 5.0,
            "10-pass variance {ten} not well below single-pass {single}"
        );
    }

    #[test]
    fn ensemble_requires_two_members_and_shared_spec() {
        let model = dropout_model();
        assert!(EnsembleScorer::new(vec![model.clone()]).is_err());
        let mut other = dropout_model();
        other.spec.embedding_dim = 2;
        other.parameters = nn::init(&other.spec, 1).unwrap().parameters;
        assert!(matches!(
            EnsembleScorer::new(vec![model, other]),
            Err(CalibError::MixedSpecs)
        ));
    }

    #[test]
    fn ensemble_of_identical_members_is_identity() {
        let model = dropout_model();
        let pairs = vec![(0, 0), (1, 3)];
        let det = nn::predict(&model, &pairs, PredictMode::Deterministic);
        let ensemble = EnsembleScorer::new(vec![model.clone(), model]).unwrap();
        let scores = ensemble_scores(&ensemble, &pairs);
        for (s, d) in scores.scores.iter().zip(&det) {
            assert!((s - d).abs() < 1e-15);
        }
        assert_eq!(scores.kind, ScoreKind::Calibrated(CalibrationMethod::Ensemble));
    }

    #[test]
    fn ensemble_mean_inside_member_envelope() {
        let spec = dropout_model().spec;
        let members: Vec<TrainedModel> = (0..4).map(|k| nn::init(&spec, 30 + k).unwrap()).collect();
        let pairs: Vec<(usize, usize)> = (0..4).map(|k| (k, (k + 1) % 4)).collect();
        let per_member: Vec<Vec<f64>> = members
            .iter()
            .map(|m| nn::predict(m, &pairs, PredictMode::Deterministic))
            .collect();
        let ensemble = EnsembleScorer::new(members).unwrap();
        let mean = ensemble_scores(&ensemble, &pairs);
        for k in 0..pairs.len() {
            let lo = per_member.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
            let hi = per_member.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(mean.scores[k] >= lo - 1e-15 && mean.scores[k] <= hi + 1e-15);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200)
                .prop_map(|rows| rows.into_iter().unzip())
        }

        proptest! {
            #[test]
            fn ece_is_bounded_and_permutation_invariant(
                (scores, labels) in scored_labels(),
                n_bins in 1usize..50,
                seed in any::<u64>(),
            ) {
                let e = ece(&scores, &labels, n_bins).unwrap();
                prop_assert!((0.0..=1.0).contains(&e));

                let mut order: Vec<usize> = (0..scores.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                let ps: Vec<f64> = order.iter().map(|&k| scores[k]).collect();
                let pl: Vec<bool> = order.iter().map(|&k| labels[k]).collect();
                // Bin sums are permutation-invariant up to f64 reassociation.
                let shuffled = ece(&ps, &pl, n_bins).unwrap();
                prop_assert!((e - shuffled).abs() < 1e-12, "{e} vs {shuffled}");
            }

            #[test]
            fn positive_slope_platt_is_monotone(
                scores in proptest::collection::vec(0.001f64..0.999, 2..50),
                b in 0.01f64..8.0,
                c in -4.0f64..4.0,
            ) {
                // Strictly monotone in exact arithmetic; in f64 a tiny slope
                // can round near-equal outputs together, so assert the weak
                // order (never an inversion).
                let params = PlattParams { b, c };
                let calibrated = platt_apply(&params, &scores);
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&x, &y| scores[x].partial_cmp(&scores[y]).unwrap());
                for pair in order.windows(2) {
                    prop_assert!(calibrated[pair[0]] <= calibrated[pair[1]]);
                }
            }

            #[test]
            fn reliability_counts_partition_samples(
                (scores, labels) in scored_labels(),
                n_bins in 1usize..50,
            ) {
                let curve = reliability_curve(&scores, &labels, n_bins).unwrap();
                let total: usize = curve.bins.iter().map(|b| b.count).sum();
                prop_assert_eq!(total, scores.len());
                prop_assert_eq!(curve.bins.len(), n_bins);
            }
        }
    }

    #[test]
    fn train_ensemble_deterministic_and_distinct_members() {
        use crate::data::{build_observation_dataset, RatingDataset, RatingEntry};
        let entries: Vec<RatingEntry> = (0..12)
            .map(|k| RatingEntry {
                user: k / 4,
                item: k % 4,
                rating: 4,
            })
            .collect();
        let ds = RatingDataset::new(3, 8, entries, 4).unwrap();
        let obs = build_observation_dataset(&ds, 0).unwrap();
        let spec = ModelSpec {
            n_users: 3,
            n_items: 8,
            embedding_dim: 4,
            mlp_layers: vec![8, 1],
            dropout_rate: 0.2,
        };
        let cfg = TrainConfig::new(3, 4, 0.1, nn::Loss::Bce);
        assert!(train_ensemble(&obs, &spec, &cfg, 1, 5).is_err());
        let a = train_ensemble(&obs, &spec, &cfg, 3, 5).unwrap();
        let b = train_ensemble(&obs, &spec, &cfg, 3, 5).unwrap();
        for (ma, mb) in a.members().iter().zip(b.members()) {
            assert_eq!(ma.parameters, mb.parameters);
        }
        for i in 0..a.size() {
            for j in i + 1..a.size() {
                assert_ne!(a.members()[i].parameters, a.members()[j].parameters);
            }
        }
    }
}
