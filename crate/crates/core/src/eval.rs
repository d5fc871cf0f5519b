//! Ranking evaluation on the MAR test split.
//!
//! Per user, that user's test items are ranked by model score and scored
//! with DCG@K and the unnormalized Recall@K (a plain count of relevant items
//! in the top K, so values can exceed 1). Metrics are averaged over users;
//! the cross-K "Average" is the mean of every DCG and Recall cell.

use serde::{Deserialize, Serialize};

use crate::data::RatingDataset;
use crate::nn::{self, PredictMode, TrainedModel};

/// `Σ_{k=1..min(K, len)} rel_k / log2(k + 1)`.
pub fn dcg_at_k(relevance_in_rank_order: &[bool], k: usize) -> f64 {
    relevance_in_rank_order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &rel)| rel)
        .map(|(idx, _)| 1.0 / ((idx + 2) as f64).log2())
        .sum()
}

/// Unnormalized recall: the count of relevant items in the top K.
pub fn recall_at_k(relevance_in_rank_order: &[bool], k: usize) -> f64 {
    relevance_in_rank_order
        .iter()
        .take(k)
        .filter(|&&rel| rel)
        .count() as f64
}

/// Per-model ranking metrics at each cutoff plus the cross-K average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ks: Vec<usize>,
    pub dcg: Vec<f64>,
    pub recall: Vec<f64>,
    /// Mean of every DCG and Recall cell.
    pub average: f64,
    pub users_evaluated: usize,
}

/// Ranks every user's test items by deterministic model score (ties broken
/// by ascending item index), averages DCG@K and Recall@K over users with at
/// least one test item.
pub fn evaluate(model: &TrainedModel, test: &RatingDataset, ks: &[usize]) -> RankingMetrics {
    let mut per_user: Vec<Vec<(usize, bool)>> = vec![Vec::new(); test.n_users];
    for (entry, &rel) in test.entries.iter().zip(&test.relevance) {
        per_user[entry.user].push((entry.item, rel));
    }

    let mut dcg_sums = vec![0.0; ks.len()];
    let mut recall_sums = vec![0.0; ks.len()];
    let mut users_evaluated = 0usize;
    for (user, items) in per_user.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        users_evaluated += 1;
        let pairs: Vec<(usize, usize)> = items.iter().map(|&(item, _)| (user, item)).collect();
        let scores = nn::predict(model, &pairs, PredictMode::Deterministic);
        let mut ranked: Vec<(usize, bool, f64)> = items
            .iter()
            .zip(&scores)
            .map(|(&(item, rel), &score)| (item, rel, score))
            .collect();
        ranked.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let rels: Vec<bool> = ranked.iter().map(|&(_, rel, _)| rel).collect();
        for (slot, &k) in ks.iter().enumerate() {
            dcg_sums[slot] += dcg_at_k(&rels, k);
            recall_sums[slot] += recall_at_k(&rels, k);
        }
    }

    let n = (users_evaluated.max(1)) as f64;
    let dcg: Vec<f64> = dcg_sums.iter().map(|s| s / n).collect();
    let recall: Vec<f64> = recall_sums.iter().map(|s| s / n).collect();
    let average = dcg.iter().chain(&recall).sum::<f64>() / (2 * ks.len()) as f64;
    RankingMetrics {
        ks: ks.to_vec(),
        dcg,
        recall,
        average,
        users_evaluated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RatingDataset, RatingEntry};
    use crate::nn::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dcg_hand_values() {
        assert_eq!(dcg_at_k(&[false, false, false], 3), 0.0);
        let all = dcg_at_k(&[true, true, true], 3);
        let expected = 1.0 + 1.0 / 3.0f64.log2() + 0.5;
        assert!((all - expected).abs() < 1e-12);
        assert!((all - 2.1309).abs() < 5e-5);
        let second = dcg_at_k(&[false, true], 2);
        assert!((second - 1.0 / 3.0f64.log2()).abs() < 1e-12);
        assert!((second - 0.6309).abs() < 5e-5);
    }

    #[test]
    fn recall_hand_values() {
        assert_eq!(recall_at_k(&[true, false, true], 2), 1.0);
        assert_eq!(recall_at_k(&[false, false], 2), 0.0);
        assert_eq!(recall_at_k(&[true, true, false, false, true, false], 6), 3.0);
    }

    #[test]
    fn metrics_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..1_000 {
            let len = rng.gen_range(1..12);
            let rels: Vec<bool> = (0..len).map(|_| rng.gen()).collect();
            for k in 1..len {
                assert!(dcg_at_k(&rels, k) <= dcg_at_k(&rels, k + 1) + 1e-15);
                assert!(recall_at_k(&rels, k) <= recall_at_k(&rels, k + 1));
            }
        }
    }

    #[test]
    fn relevant_first_maximizes_both_metrics() {
        // Brute-force over permutations of short lists.
        fn permutations(items: &[bool]) -> Vec<Vec<bool>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let head = rest.remove(i);
                for mut tail in permutations(&rest) {
                    tail.insert(0, head);
                    out.push(tail);
                }
            }
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let len = rng.gen_range(1..=6);
            let rels: Vec<bool> = (0..len).map(|_| rng.gen()).collect();
            let mut sorted = rels.clone();
            sorted.sort_by_key(|&r| !r);
            for k in 1..=len {
                let best_dcg = dcg_at_k(&sorted, k);
                let best_recall = recall_at_k(&sorted, k);
                for perm in permutations(&rels) {
                    assert!(dcg_at_k(&perm, k) <= best_dcg + 1e-12);
                    assert!(recall_at_k(&perm, k) <= best_recall);
                }
            }
        }
    }

    fn test_dataset() -> RatingDataset {
        let entries = vec![
            RatingEntry { user: 0, item: 0, rating: 5 },
            RatingEntry { user: 0, item: 1, rating: 4 },
            RatingEntry { user: 0, item: 2, rating: 5 },
            // user 1 has no test items.
            RatingEntry { user: 2, item: 1, rating: 2 },
            RatingEntry { user: 2, item: 3, rating: 5 },
        ];
        RatingDataset::new(3, 4, entries, 4).unwrap()
    }

    fn any_model() -> TrainedModel {
        nn::init(
            &ModelSpec {
                n_users: 3,
                n_items: 4,
                embedding_dim: 4,
                mlp_layers: vec![8, 1],
                dropout_rate: 0.0,
            },
            30,
        )
        .unwrap()
    }

    #[test]
    fn all_relevant_user_hits_dcg_ceiling() {
        let entries = vec![
            RatingEntry { user: 0, item: 0, rating: 5 },
            RatingEntry { user: 0, item: 1, rating: 4 },
            RatingEntry { user: 0, item: 2, rating: 5 },
        ];
        let test = RatingDataset::new(1, 4, entries, 4).unwrap();
        let metrics = evaluate(&any_model(), &test, &[2]);
        assert!((metrics.dcg[0] - 1.6309).abs() < 5e-5);
        assert_eq!(metrics.users_evaluated, 1);
    }

    #[test]
    fn table_shape_and_average() {
        let metrics = evaluate(&any_model(), &test_dataset(), &[2, 4, 6]);
        assert_eq!(metrics.dcg.len(), 3);
        assert_eq!(metrics.recall.len(), 3);
        assert_eq!(metrics.users_evaluated, 2);
        let mean: f64 =
            metrics.dcg.iter().chain(&metrics.recall).sum::<f64>() / 6.0;
        assert!((metrics.average - mean).abs() < 1e-15);
    }

    #[test]
    fn evaluation_is_pure_and_tie_break_deterministic() {
        let test = test_dataset();
        // A model with all-zero parameters scores every item equally, so the
        // ranking reduces to ascending item index.
        let mut model = any_model();
        model.parameters.iter_mut().for_each(|p| *p = 0.0);
        let a = evaluate(&model, &test, &[2, 4]);
        let b = evaluate(&model, &test, &[2, 4]);
        assert_eq!(a, b);
        // User 0 items in index order: 0 (rel), 1 (rel), 2 (rel) → dcg@2 full;
        // user 2: 1 (irrelevant), 3 (rel) → dcg@2 = 1/log2(3).
        let expected_u0 = 1.0 + 1.0 / 3.0f64.log2();
        let expected_u2 = 1.0 / 3.0f64.log2();
        assert!((a.dcg[0] - (expected_u0 + expected_u2) / 2.0).abs() < 1e-12);
    }
}
