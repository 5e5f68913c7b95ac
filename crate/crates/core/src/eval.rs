//! Full-ranking top-k evaluation with Recall@k and NDCG@k.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::Serialize;

use crate::kg::{DatasetSplit, InteractionGraph, ItemId, UserId};

/// Top `k` candidate items by descending score, ties by ascending id.
pub fn rank_items(scores: &[f64], excluded: &[ItemId], k: usize) -> Vec<ItemId> {
    let mut skip = vec![false; scores.len()];
    for i in excluded {
        skip[i.index()] = true;
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand.into_iter().map(ItemId::from_index).collect()
}

/// `|top-k ∩ relevant| / |relevant|`. `relevant` must be non-empty.
pub fn recall_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG with `1/log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| gain(r + 1))
        .sum();
    let idcg: f64 = (1..=relevant.len().min(k)).map(gain).sum();
    dcg / idcg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserMetrics {
    pub user: UserId,
    pub recall: f64,
    pub ndcg: f64,
    pub top: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingResult {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    pub per_user: Vec<UserMetrics>,
}

/// Scores `x_uᵀ x_i` for every user with targets, excluding the items in
/// `exclude` graphs, and averages the metrics over those users.
pub fn full_rank(
    users: &Array2<f64>,
    items: &Array2<f64>,
    exclude: &[&InteractionGraph],
    target: &InteractionGraph,
    k: usize,
) -> RankingResult {
    assert!(k >= 1, "k must be positive");
    let mut per_user = Vec::new();
    for u in 0..target.n_users() {
        let uid = UserId::from_index(u);
        let relevant = target.items_of(uid);
        if relevant.is_empty() {
            continue;
        }
        let scores = items.dot(&users.row(u));
        let excluded: Vec<ItemId> = exclude
            .iter()
            .flat_map(|g| g.items_of(uid).iter().copied())
            .collect();
        let top = rank_items(scores.as_slice().expect("contiguous scores"), &excluded, k);
        per_user.push(UserMetrics {
            user: uid,
            recall: recall_at_k(&top, relevant, k),
            ndcg: ndcg_at_k(&top, relevant, k),
            top,
        });
    }
    let n = per_user.len();
    let mean = |f: fn(&UserMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / n as f64
        }
    };
    RankingResult {
        k,
        recall: mean(|m| m.recall),
        ndcg: mean(|m| m.ndcg),
        users_evaluated: n,
        per_user,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Validation,
    Test,
}

/// Validation excludes train items; test excludes train and validation items.
pub fn evaluate_split(
    users: &Array2<f64>,
    items: &Array2<f64>,
    split: &DatasetSplit,
    which: EvalSplit,
    k: usize,
) -> RankingResult {
    match which {
        EvalSplit::Validation => full_rank(users, items, &[&split.train], &split.validation, k),
        EvalSplit::Test => full_rank(
            users,
            items,
            &[&split.train, &split.validation],
            &split.test,
            k,
        ),
    }
}

/// JSON report with `recall@k` / `ndcg@k` keys.
pub fn report_json(
    result: &RankingResult,
    split: EvalSplit,
    config_hash: &str,
) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    m.insert(format!("recall@{}", result.k), result.recall.into());
    m.insert(format!("ndcg@{}", result.k), result.ndcg.into());
    m.insert("users_evaluated".into(), result.users_evaluated.into());
    m.insert(
        "split".into(),
        serde_json::to_value(split).expect("split serializes"),
    );
    m.insert("config_hash".into(), config_hash.into());
    serde_json::Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn hand_cases() {
        let ranked = ids(&[5, 1, 7, 2]);
        assert!((ndcg_at_k(&ranked, &ids(&[5, 7]), 10) - 0.919_720_6).abs() < 1e-6);
        assert!((ndcg_at_k(&ranked, &ids(&[1]), 10) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(recall_at_k(&ranked, &ids(&[5, 7]), 10), 1.0);
        assert_eq!(recall_at_k(&ranked, &ids(&[9]), 10), 0.0);
        assert_eq!(ndcg_at_k(&ranked, &ids(&[9]), 10), 0.0);
        assert_eq!(ndcg_at_k(&ranked[..2], &ids(&[5, 1]), 2), 1.0);
    }

    #[test]
    fn ties_break_by_item_id() {
        assert_eq!(
            rank_items(&[1.0, 2.0, 2.0, 0.5, 2.0], &[ItemId(2)], 3),
            ids(&[1, 4, 0])
        );
        assert_eq!(rank_items(&[1.0, 1.0], &[], 5), ids(&[0, 1]));
    }

    #[test]
    fn excluded_items_never_ranked() {
        let users = array![[1.0, 0.0], [0.0, 1.0]];
        let items = array![[3.0, 0.0], [2.0, 1.0], [0.0, 3.0], [1.0, 1.0]];
        let train =
            InteractionGraph::from_pairs(2, 4, [(UserId(0), ItemId(0)), (UserId(1), ItemId(2))]);
        let test =
            InteractionGraph::from_pairs(2, 4, [(UserId(0), ItemId(1)), (UserId(1), ItemId(3))]);
        let r = full_rank(&users, &items, &[&train], &test, 1);
        assert_eq!(r.users_evaluated, 2);
        assert_eq!(r.per_user[0].top, ids(&[1]));
        assert_eq!(r.per_user[1].top, ids(&[1]));
        assert_eq!(r.recall, 0.5);
    }

    proptest! {
        #[test]
        fn moving_a_relevant_item_into_top_k_never_lowers_metrics(
            perm in Just((0..12u32).collect::<Vec<_>>()).prop_shuffle(),
            rel_mask in prop::collection::vec(any::<bool>(), 12),
            k in 1usize..12,
            slot in 0usize..12,
        ) {
            let ranked = ids(&perm);
            let relevant: Vec<ItemId> = ranked.iter().zip(&rel_mask).filter(|(_, &m)| m).map(|(i, _)| *i).collect();
            prop_assume!(!relevant.is_empty());
            let outside: Vec<usize> = (k..12).filter(|&p| relevant.contains(&ranked[p])).collect();
            let inside: Vec<usize> = (0..k).filter(|&p| !relevant.contains(&ranked[p])).collect();
            prop_assume!(!outside.is_empty() && !inside.is_empty());
            let (a, b) = (inside[slot % inside.len()], outside[slot % outside.len()]);
            let mut better = ranked.clone();
            better.swap(a, b);
            let before = (recall_at_k(&ranked, &relevant, k), ndcg_at_k(&ranked, &relevant, k));
            let after = (recall_at_k(&better, &relevant, k), ndcg_at_k(&better, &relevant, k));
            prop_assert!(after.0 >= before.0 && after.1 >= before.1);
            prop_assert!((0.0..=1.0).contains(&after.0) && (0.0..=1.0 + 1e-12).contains(&after.1));
        }
    }
}
