//! Offline prediction-error estimators and the theory-audit suite.
//!
//! The four estimators (naive, IPS, EIB, doubly robust) score a prediction
//! matrix against partially observed ratings. The audit operations check the
//! bias identity `E_bias = |Σ ∇ e| / |D|` with `∇ = (p̂ - p)/p̂` against
//! Monte-Carlo resampling of the observation indicator, compare raw and
//! calibrated propensities, and evaluate the generalization-bound and
//! ECE-bound terms on synthetic worlds with oracle propensities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{self, CalibError};
use crate::synth::{sample_indicator, SyntheticWorld};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("propensity at index {0} is not positive")]
    NonPositivePropensity(usize),
    #[error("{left} and {right} must be aligned ({left_len} vs {right_len})")]
    Misaligned {
        left: &'static str,
        right: &'static str,
        left_len: usize,
        right_len: usize,
    },
    #[error("universe size {d} cannot be smaller than {observed} observed + {missing} missing")]
    BadUniverse {
        d: usize,
        observed: usize,
        missing: usize,
    },
    #[error("monte-carlo audit needs at least 100 trials, got {0}")]
    TooFewTrials(usize),
    #[error("hypothesis count must be >= 1")]
    EmptyHypothesisSpace,
    #[error("eta {0} must lie in (0, 1)")]
    BadEta(f64),
    #[error(transparent)]
    Calib(#[from] CalibError),
}

/// Whether per-pair errors are absolute or squared differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Mae,
    Mse,
}

/// Elementwise prediction errors of `predictions` against `truth`.
pub fn prediction_errors(truth: &[f64], predictions: &[f64], kind: ErrorKind) -> Vec<f64> {
    truth
        .iter()
        .zip(predictions)
        .map(|(t, p)| match kind {
            ErrorKind::Mae => (t - p).abs(),
            ErrorKind::Mse => (t - p) * (t - p),
        })
        .collect()
}

fn check_aligned(
    left: &'static str,
    a: usize,
    right: &'static str,
    b: usize,
) -> Result<(), EstimatorError> {
    if a != b {
        return Err(EstimatorError::Misaligned {
            left,
            right,
            left_len: a,
            right_len: b,
        });
    }
    Ok(())
}

fn check_positive(propensities: &[f64]) -> Result<(), EstimatorError> {
    if let Some(k) = propensities.iter().position(|&p| !(p > 0.0)) {
        return Err(EstimatorError::NonPositivePropensity(k));
    }
    Ok(())
}

/// Naive estimator: the observed errors averaged over the full universe,
/// `Σ_observed e / |D|`.
pub fn naive_error(observed_errors: &[f64], d_size: usize) -> f64 {
    assert!(d_size > 0, "universe must be nonempty");
    observed_errors.iter().sum::<f64>() / d_size as f64
}

/// IPS estimator: `(1/|D|) Σ_observed e / p̂`.
pub fn ips_error(
    observed_errors: &[f64],
    observed_propensities: &[f64],
    d_size: usize,
) -> Result<f64, EstimatorError> {
    assert!(d_size > 0, "universe must be nonempty");
    check_aligned(
        "errors",
        observed_errors.len(),
        "propensities",
        observed_propensities.len(),
    )?;
    check_positive(observed_propensities)?;
    Ok(observed_errors
        .iter()
        .zip(observed_propensities)
        .map(|(e, p)| e / p)
        .sum::<f64>()
        / d_size as f64)
}

/// Error-imputation-based estimator: `(1/|D|) [Σ_observed e + Σ_missing ê]`.
pub fn eib_error(
    observed_errors: &[f64],
    missing_imputed: &[f64],
    d_size: usize,
) -> Result<f64, EstimatorError> {
    if observed_errors.len() + missing_imputed.len() != d_size {
        return Err(EstimatorError::BadUniverse {
            d: d_size,
            observed: observed_errors.len(),
            missing: missing_imputed.len(),
        });
    }
    Ok(
        (observed_errors.iter().sum::<f64>() + missing_imputed.iter().sum::<f64>())
            / d_size as f64,
    )
}

/// Doubly robust estimator:
/// `(1/|D|) [Σ_observed (ê + (e - ê)/p̂) + Σ_missing ê]`.
pub fn dr_error(
    observed_errors: &[f64],
    observed_imputed: &[f64],
    observed_propensities: &[f64],
    missing_imputed: &[f64],
    d_size: usize,
) -> Result<f64, EstimatorError> {
    check_aligned(
        "errors",
        observed_errors.len(),
        "imputed errors",
        observed_imputed.len(),
    )?;
    check_aligned(
        "errors",
        observed_errors.len(),
        "propensities",
        observed_propensities.len(),
    )?;
    if observed_errors.len() + missing_imputed.len() != d_size {
        return Err(EstimatorError::BadUniverse {
            d: d_size,
            observed: observed_errors.len(),
            missing: missing_imputed.len(),
        });
    }
    check_positive(observed_propensities)?;
    let observed_sum: f64 = observed_errors
        .iter()
        .zip(observed_imputed)
        .zip(observed_propensities)
        .map(|((e, ehat), p)| ehat + (e - ehat) / p)
        .sum();
    Ok((observed_sum + missing_imputed.iter().sum::<f64>()) / d_size as f64)
}

/// Analytic propensity bias from the bias identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityBias {
    /// `|Σ ∇ e| / |D|`.
    pub bias: f64,
    /// `∇_k = (p̂_k - p_k) / p̂_k`, per pair.
    pub nabla: Vec<f64>,
}

/// Analytic IPS bias over the full universe: `∇ = (p̂ - p)/p̂` and
/// `bias = |Σ ∇ e| / |D|`.
pub fn ips_bias_analytic(
    true_p: &[f64],
    est_p: &[f64],
    errors: &[f64],
) -> Result<PropensityBias, EstimatorError> {
    check_aligned("true propensities", true_p.len(), "estimated", est_p.len())?;
    check_aligned("true propensities", true_p.len(), "errors", errors.len())?;
    check_positive(est_p)?;
    let nabla: Vec<f64> = true_p
        .iter()
        .zip(est_p)
        .map(|(p, phat)| (phat - p) / phat)
        .collect();
    let d = errors.len() as f64;
    let bias = nabla
        .iter()
        .zip(errors)
        .map(|(n, e)| n * e)
        .sum::<f64>()
        .abs()
        / d;
    Ok(PropensityBias { bias, nabla })
}

/// Monte-Carlo vs analytic bias of the IPS estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub analytic_bias: f64,
    /// `|mean_t E_IPS^(t) - full-information error|`.
    pub mc_bias: f64,
    /// Standard error of the per-trial IPS estimates' mean.
    pub mc_stderr: f64,
    pub per_pair_nabla: Vec<f64>,
}

/// Samples `trials` indicator matrices (trial `t` seeded `seed + t`),
/// evaluates the IPS estimator on each, and reports the Monte-Carlo bias
/// against the full-information error together with the analytic bias.
pub fn ips_bias_mc(
    world: &SyntheticWorld,
    est_p: &[f64],
    errors: &[f64],
    trials: usize,
    seed: u64,
) -> Result<BiasReport, EstimatorError> {
    if trials < 100 {
        return Err(EstimatorError::TooFewTrials(trials));
    }
    let d = world.universe_size();
    check_aligned("world", d, "estimated propensities", est_p.len())?;
    check_aligned("world", d, "errors", errors.len())?;
    check_positive(est_p)?;

    let estimates: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let sample = sample_indicator(world, seed + t as u64);
            let mut sum = 0.0;
            for (k, &observed) in sample.indicator.iter().enumerate() {
                if observed {
                    sum += errors[k] / est_p[k];
                }
            }
            sum / d as f64
        })
        .collect();

    let n = trials as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let variance = estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mc_stderr = (variance / n).sqrt();
    let full_information = errors.iter().sum::<f64>() / d as f64;
    let analytic = ips_bias_analytic(&world.true_propensities, est_p, errors)?;

    Ok(BiasReport {
        analytic_bias: analytic.bias,
        mc_bias: (mean - full_information).abs(),
        mc_stderr,
        per_pair_nabla: analytic.nabla,
    })
}

/// Raw-vs-calibrated bias comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub bias_raw: f64,
    pub bias_cal: f64,
    /// `bias_cal <= bias_raw`.
    pub dominates: bool,
    /// The sufficient condition under which dominance is forced:
    /// `|∇̃ e| <= |∇ e|` pointwise and all nonzero `∇ e` terms share a sign.
    pub pointwise_dominates: bool,
}

/// Compares the bias identity under raw and calibrated propensities.
pub fn calibrated_bias_compare(
    true_p: &[f64],
    raw_p: &[f64],
    calibrated_p: &[f64],
    errors: &[f64],
) -> Result<BiasComparison, EstimatorError> {
    let raw = ips_bias_analytic(true_p, raw_p, errors)?;
    let cal = ips_bias_analytic(true_p, calibrated_p, errors)?;

    let mut pointwise = true;
    let mut sign = 0.0f64;
    for ((nr, nc), e) in raw.nabla.iter().zip(&cal.nabla).zip(errors) {
        let raw_term = nr * e;
        let cal_term = nc * e;
        if cal_term.abs() > raw_term.abs() + 1e-15 {
            pointwise = false;
            break;
        }
        if raw_term != 0.0 {
            if sign == 0.0 {
                sign = raw_term.signum();
            } else if raw_term.signum() != sign {
                pointwise = false;
                break;
            }
        }
    }

    Ok(BiasComparison {
        bias_raw: raw.bias,
        bias_cal: cal.bias,
        dominates: cal.bias <= raw.bias,
        pointwise_dominates: pointwise,
    })
}

/// The doubly-robust analogue of the bias identity, with the imputation
/// deviation `δ = e - ê` in place of `e`: `|Σ ∇ δ| / |D|`.
pub fn dr_bias_analytic(nabla: &[f64], deltas: &[f64]) -> Result<f64, EstimatorError> {
    check_aligned("nabla", nabla.len(), "deltas", deltas.len())?;
    let d = nabla.len() as f64;
    Ok(nabla
        .iter()
        .zip(deltas)
        .map(|(n, delta)| n * delta)
        .sum::<f64>()
        .abs()
        / d)
}

/// The three terms of the generalization bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub empirical_error: f64,
    /// `Σ ∇̃ / |D|` (signed).
    pub bias_term: f64,
    /// `sqrt( log(2|H|/η) / (2|D|²) * Σ 1/p̂² )`.
    pub variance_term: f64,
    pub total: f64,
}

/// Evaluates the bound terms for a finite hypothesis space of size
/// `hypothesis_count` at confidence level `1 - eta`.
pub fn generalization_bound(
    empirical_error: f64,
    nabla_tilde: &[f64],
    est_p: &[f64],
    hypothesis_count: usize,
    eta: f64,
) -> Result<BoundTerms, EstimatorError> {
    if hypothesis_count == 0 {
        return Err(EstimatorError::EmptyHypothesisSpace);
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(EstimatorError::BadEta(eta));
    }
    check_aligned("nabla", nabla_tilde.len(), "propensities", est_p.len())?;
    check_positive(est_p)?;
    let d = nabla_tilde.len() as f64;
    let bias_term = nabla_tilde.iter().sum::<f64>() / d;
    let inv_sq_sum: f64 = est_p.iter().map(|p| 1.0 / (p * p)).sum();
    let variance_term =
        ((2.0 * hypothesis_count as f64 / eta).ln() / (2.0 * d * d) * inv_sq_sum).sqrt();
    Ok(BoundTerms {
        empirical_error,
        bias_term,
        variance_term,
        total: empirical_error + bias_term + variance_term,
    })
}

/// Both sides of the ECE bound on the calibrated bias term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceBoundAudit {
    /// `Σ ∇̃ / |D|`.
    pub lhs: f64,
    /// `n_bins * ECE(calibrated scores, labels)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Reports whether the calibrated bias term is bounded by `n · ECE`.
///
/// This audit reports rather than asserts: near the propensity floor the
/// bound can fail, so callers decide what to make of `holds`.
pub fn ece_bound_audit(
    true_p: &[f64],
    calibrated_p: &[f64],
    labels: &[bool],
    n_bins: usize,
) -> Result<EceBoundAudit, EstimatorError> {
    check_aligned("true propensities", true_p.len(), "calibrated", calibrated_p.len())?;
    check_aligned("true propensities", true_p.len(), "labels", labels.len())?;
    check_positive(calibrated_p)?;
    let d = true_p.len() as f64;
    let lhs = true_p
        .iter()
        .zip(calibrated_p)
        .map(|(p, pt)| (pt - p) / pt)
        .sum::<f64>()
        / d;
    let rhs = n_bins as f64 * calib::ece(calibrated_p, labels, n_bins)?;
    Ok(EceBoundAudit {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn naive_error_cases() {
        assert_eq!(naive_error(&[1.0, 1.0, 1.0, 1.0], 4), 1.0);
        assert_eq!(naive_error(&[1.0, 1.0], 4), 0.5);
        assert_eq!(naive_error(&[], 4), 0.0);
    }

    #[test]
    fn ips_error_cases() {
        // Fully observed with p = 1 equals the naive estimator.
        let e = [0.5, 1.5, 1.0];
        assert_eq!(
            ips_error(&e, &[1.0, 1.0, 1.0], 3).unwrap(),
            naive_error(&e, 3)
        );
        // Hand case: |D| = 2, one observed pair, e = 1, p = 0.5.
        assert_eq!(ips_error(&[1.0], &[0.5], 2).unwrap(), 1.0);
        // Halving propensities doubles the estimate.
        let p = [0.8, 0.4, 0.2];
        let halved: Vec<f64> = p.iter().map(|x| x / 2.0).collect();
        let base = ips_error(&e, &p, 5).unwrap();
        let double = ips_error(&e, &halved, 5).unwrap();
        assert!((double - 2.0 * base).abs() < 1e-12);
        // Zero propensity errors out.
        assert!(ips_error(&[1.0], &[0.0], 2).is_err());
    }

    #[test]
    fn eib_error_cases() {
        // Perfect imputation on the missing half gives the full-information mean.
        let full = [0.2, 0.4, 0.6, 0.8];
        assert!(
            (eib_error(&full[..2], &full[2..], 4).unwrap() - 0.5).abs() < 1e-15
        );
        // Fully observed: equals naive.
        assert_eq!(eib_error(&full, &[], 4).unwrap(), naive_error(&full, 4));
        // Nothing observed, constant imputation 0.3.
        let imputed = [0.3; 5];
        assert!((eib_error(&[], &imputed, 5).unwrap() - 0.3).abs() < 1e-15);
        assert!(eib_error(&[1.0], &[1.0], 5).is_err());
    }

    #[test]
    fn dr_error_cases() {
        // Hand case: (0.5 + 1 + 0.2) / 2 = 0.85.
        let dr = dr_error(&[1.0], &[0.5], &[0.5], &[0.2], 2).unwrap();
        assert!((dr - 0.85).abs() < 1e-15);
        // With imputation equal to truth the propensities cancel out.
        let e = [0.3, 0.9];
        let missing = [0.1, 0.7];
        let full_mean = (0.3 + 0.9 + 0.1 + 0.7) / 4.0;
        for p in [[0.2, 0.9], [1.0, 1.0], [0.05, 0.5]] {
            let v = dr_error(&e, &e, &p, &missing, 4).unwrap();
            assert!((v - full_mean).abs() < 1e-14, "p {p:?}: {v}");
        }
        // With zero imputation DR reduces to IPS.
        let p = [0.4, 0.8];
        let ips = ips_error(&e, &p, 4).unwrap();
        let reduced = dr_error(&e, &[0.0, 0.0], &p, &[0.0, 0.0], 4).unwrap();
        assert!((reduced - ips).abs() < 1e-15);
    }

    #[test]
    fn dr_exactness_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let n_obs = rng.gen_range(1..50);
            let n_miss = rng.gen_range(0..50);
            let d = n_obs + n_miss;
            let e: Vec<f64> = (0..n_obs).map(|_| rng.gen_range(0.0..3.0)).collect();
            let p: Vec<f64> = (0..n_obs).map(|_| rng.gen_range(0.01..1.0)).collect();
            let missing: Vec<f64> = (0..n_miss).map(|_| rng.gen_range(0.0..3.0)).collect();
            let full = (e.iter().sum::<f64>() + missing.iter().sum::<f64>()) / d as f64;
            let v = dr_error(&e, &e, &p, &missing, d).unwrap();
            assert!(
                (v - full).abs() <= 1e-12 * full.abs().max(1.0),
                "{v} vs {full}"
            );
        }
    }

    #[test]
    fn analytic_bias_hand_cases() {
        // p̂ = p gives zero bias.
        let zero = ips_bias_analytic(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 2.0]).unwrap();
        assert_eq!(zero.bias, 0.0);
        assert!(zero.nabla.iter().all(|&n| n == 0.0));
        // |D| = 2, e = [1,1], p = [0.5,0.5], p̂ = [1,1] → ∇ = [0.5,0.5], bias 0.5.
        let b = ips_bias_analytic(&[0.5, 0.5], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(b.nabla, vec![0.5, 0.5]);
        assert!((b.bias - 0.5).abs() < 1e-15);
        // p = [0.5], p̂ = [0.25], e = [2] → ∇ = -1, bias 2.
        let c = ips_bias_analytic(&[0.5], &[0.25], &[2.0]).unwrap();
        assert_eq!(c.nabla, vec![-1.0]);
        assert!((c.bias - 2.0).abs() < 1e-15);
    }

    fn audit_world() -> (SyntheticWorld, Vec<f64>) {
        let world = generate_world(
            &WorldConfig {
                n_users: 20,
                n_items: 20,
                bias_strength: 1.0,
                base_rate: 0.15,
            },
            5,
        )
        .unwrap();
        let errors: Vec<f64> = world.true_ratings.iter().map(|r| (r - 3.0).abs()).collect();
        (world, errors)
    }

    #[test]
    fn mc_bias_unbiased_with_oracle_propensities() {
        let (world, errors) = audit_world();
        let report =
            ips_bias_mc(&world, &world.true_propensities.clone(), &errors, 10_000, 77).unwrap();
        assert!(report.analytic_bias < 1e-15);
        assert!(
            report.mc_bias < 3.0 * report.mc_stderr,
            "mc bias {} vs stderr {}",
            report.mc_bias,
            report.mc_stderr
        );
    }

    #[test]
    fn mc_bias_matches_analytic_for_doubled_propensities() {
        let (world, errors) = audit_world();
        let doubled: Vec<f64> = world
            .true_propensities
            .iter()
            .map(|p| (2.0 * p).min(1.0))
            .collect();
        let report = ips_bias_mc(&world, &doubled, &errors, 10_000, 78).unwrap();
        assert!(
            (report.mc_bias - report.analytic_bias).abs() < 3.0 * report.mc_stderr,
            "mc {} analytic {} stderr {}",
            report.mc_bias,
            report.analytic_bias,
            report.mc_stderr
        );
    }

    #[test]
    fn mc_stderr_scales_with_trials() {
        let (world, errors) = audit_world();
        let est = world.true_propensities.clone();
        let small = ips_bias_mc(&world, &est, &errors, 100, 79).unwrap();
        let large = ips_bias_mc(&world, &est, &errors, 10_000, 79).unwrap();
        let ratio = small.mc_stderr / large.mc_stderr;
        assert!(
            (8.0..12.0).contains(&ratio),
            "stderr ratio {ratio} not near 10"
        );
        assert!(matches!(
            ips_bias_mc(&world, &est, &errors, 99, 0),
            Err(EstimatorError::TooFewTrials(99))
        ));
    }

    #[test]
    fn calibrated_comparison_cases() {
        let p = [0.2, 0.5, 0.8];
        let raw = [0.6, 0.9, 0.9];
        let e = [1.0, 0.5, 2.0];
        // Perfect calibration dominates.
        let perfect = calibrated_bias_compare(&p, &raw, &p, &e).unwrap();
        assert_eq!(perfect.bias_cal, 0.0);
        assert!(perfect.dominates && perfect.pointwise_dominates);
        // Identical propensities tie.
        let tie = calibrated_bias_compare(&p, &raw, &raw, &e).unwrap();
        assert_eq!(tie.bias_raw, tie.bias_cal);
        assert!(tie.dominates && tie.pointwise_dominates);
        // Strictly-between calibration shrinks every same-sign term.
        let between = [0.4, 0.7, 0.85];
        let cmp = calibrated_bias_compare(&p, &raw, &between, &e).unwrap();
        assert!(cmp.pointwise_dominates);
        assert!(cmp.dominates);
        assert!(cmp.bias_cal < cmp.bias_raw);
    }

    #[test]
    fn dr_bias_cases() {
        assert_eq!(dr_bias_analytic(&[0.5, -0.2], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(dr_bias_analytic(&[0.0, 0.0], &[1.0, -2.0]).unwrap(), 0.0);
        let v = dr_bias_analytic(&[0.5], &[0.4]).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bound_terms_worked_example() {
        // ∇̃ ≡ 0, p̂ ≡ 1, |H| = 2, η = 0.05, |D| = 4.
        let terms =
            generalization_bound(0.0, &[0.0; 4], &[1.0; 4], 2, 0.05).unwrap();
        let expected = (80.0f64.ln() * 4.0 / 32.0).sqrt();
        assert!((terms.variance_term - expected).abs() < 1e-12);
        assert_eq!(terms.bias_term, 0.0);
        assert!((terms.total - expected).abs() < 1e-12);
    }

    #[test]
    fn bound_scaling_and_monotonicity() {
        let nabla = [0.1, -0.05, 0.2];
        let p = [0.5, 0.25, 0.8];
        let halved: Vec<f64> = p.iter().map(|x| x / 2.0).collect();
        let base = generalization_bound(0.3, &nabla, &p, 10, 0.05).unwrap();
        let tight = generalization_bound(0.3, &nabla, &halved, 10, 0.05).unwrap();
        assert!((tight.variance_term - 2.0 * base.variance_term).abs() < 1e-12);

        // Larger eta loosens the variance term; larger |H| tightens it upward.
        let looser = generalization_bound(0.3, &nabla, &p, 10, 0.5).unwrap();
        assert!(looser.variance_term < base.variance_term);
        assert!(looser.total < base.total);
        let bigger_h = generalization_bound(0.3, &nabla, &p, 1000, 0.05).unwrap();
        assert!(bigger_h.total > base.total);

        assert!(generalization_bound(0.0, &nabla, &p, 0, 0.05).is_err());
        assert!(generalization_bound(0.0, &nabla, &p, 2, 1.0).is_err());
    }

    #[test]
    fn ece_audit_perfect_calibration_holds_at_zero() {
        // Scores exactly match per-bin label frequencies and true propensities.
        let p = [0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
        let labels = [
            true, false, false, false, true, true, true, false,
        ];
        let audit = ece_bound_audit(&p, &p, &labels, 2).unwrap();
        assert_eq!(audit.lhs, 0.0);
        assert!(audit.rhs.abs() < 1e-15);
        assert!(audit.holds);
    }

    #[test]
    fn ece_audit_rhs_is_bins_times_ece() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..400).map(|_| rng.gen_range(0.05..0.95)).collect();
        let cal: Vec<f64> = p.iter().map(|x| (x * 1.1).min(0.99)).collect();
        let labels: Vec<bool> = p.iter().map(|&x| rng.gen::<f64>() < x).collect();
        for bins in [1usize, 10, 100] {
            let audit = ece_bound_audit(&p, &cal, &labels, bins).unwrap();
            let expected = bins as f64 * calib::ece(&cal, &labels, bins).unwrap();
            assert_eq!(audit.rhs, expected);
        }
    }
}
