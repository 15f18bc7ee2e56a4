//! Top-k recommendation and the utility and group-fairness metrics computed
//! on it.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Embeddings;
use crate::dataset::{GroupMap, InteractionTable};
use crate::error::{Error, Result};

/// One user's top-k list, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

fn by_score_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` unmasked items by score for `user`, ties broken by ascending
/// item index. Shorter than `k` when fewer items remain.
pub fn rank_items(scores: &[f64], masked: impl Fn(usize) -> bool, k: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !masked(*i))
        .map(|(i, &s)| (i, s))
        .collect();
    if cand.len() > k && k > 0 {
        cand.select_nth_unstable_by(k - 1, by_score_then_index);
        cand.truncate(k);
    }
    cand.truncate(k);
    cand.sort_by(by_score_then_index);
    cand
}

/// Ranks all items for every user with at least one positive in `target`,
/// masking the positives of every table in `masks`.
pub fn topk_recommend(
    emb: &Embeddings<'_>,
    masks: &[&InteractionTable],
    target: &InteractionTable,
    k: usize,
) -> Result<Vec<RankedList>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let users: Vec<usize> = (0..target.num_users()).filter(|&u| !target.positives(u).is_empty()).collect();
    Ok(users
        .par_iter()
        .map(|&u| {
            let scores = emb.user_scores(u);
            let top = rank_items(&scores, |i| masks.iter().any(|m| m.contains(u, i)), k);
            RankedList {
                user: u,
                items: top.iter().map(|t| t.0).collect(),
                scores: top.iter().map(|t| t.1).collect(),
            }
        })
        .collect())
}

fn hits_in<'a>(list: &'a RankedList, test: &'a InteractionTable, k: usize) -> impl Iterator<Item = (usize, usize)> + 'a {
    list.items
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, &i)| test.contains(list.user, i))
        .map(|(rank, &i)| (rank, i))
}

fn mean_over_users(lists: &[RankedList], f: impl Fn(&RankedList) -> f64) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    lists.iter().map(f).sum::<f64>() / lists.len() as f64
}

/// Mean per-user `|hits| / |test positives|`.
pub fn recall_at_k(lists: &[RankedList], test: &InteractionTable, k: usize) -> f64 {
    mean_over_users(lists, |l| {
        hits_in(l, test, k).count() as f64 / test.positives(l.user).len() as f64
    })
}

/// Mean per-user `|hits| / k`.
pub fn precision_at_k(lists: &[RankedList], test: &InteractionTable, k: usize) -> f64 {
    mean_over_users(lists, |l| hits_in(l, test, k).count() as f64 / k as f64)
}

/// Mean per-user NDCG with binary gains and `log2(rank + 1)` discounts.
pub fn ndcg_at_k(lists: &[RankedList], test: &InteractionTable, k: usize) -> f64 {
    mean_over_users(lists, |l| {
        let dcg: f64 = hits_in(l, test, k).map(|(rank, _)| 1.0 / ((rank + 2) as f64).log2()).sum();
        let ideal = test.positives(l.user).len().min(k);
        let idcg: f64 = (0..ideal).map(|rank| 1.0 / ((rank + 2) as f64).log2()).sum();
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    })
}

/// Harmonic mean of overall precision and recall.
pub fn f1_at_k(lists: &[RankedList], test: &InteractionTable, k: usize) -> f64 {
    f1(precision_at_k(lists, test, k), recall_at_k(lists, test, k))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// How per-group recall pools users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupAggregation {
    /// Pooled hits over pooled test positives.
    Micro,
    /// Mean of per-user group recalls over users with positives in the
    /// group.
    Macro,
}

impl std::str::FromStr for GroupAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(GroupAggregation::Micro),
            "macro" => Ok(GroupAggregation::Macro),
            other => Err(Error::Config(format!("unknown group aggregation {other:?}"))),
        }
    }
}

/// Pooled per-group hit and test-positive counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupCounts {
    pub hits: Vec<usize>,
    pub positives: Vec<usize>,
}

pub fn group_counts(lists: &[RankedList], test: &InteractionTable, groups: &GroupMap, k: usize) -> GroupCounts {
    let a = groups.num_groups();
    let mut counts = GroupCounts {
        hits: vec![0; a],
        positives: vec![0; a],
    };
    for l in lists {
        for &i in test.positives(l.user) {
            counts.positives[groups.group_of(i)] += 1;
        }
        for (_, i) in hits_in(l, test, k) {
            counts.hits[groups.group_of(i)] += 1;
        }
    }
    counts
}

/// Recall@k per group; `None` for groups without test positives.
pub fn group_recall_at_k(
    lists: &[RankedList],
    test: &InteractionTable,
    groups: &GroupMap,
    k: usize,
    aggregation: GroupAggregation,
) -> Vec<Option<f64>> {
    match aggregation {
        GroupAggregation::Micro => {
            let c = group_counts(lists, test, groups, k);
            c.hits
                .iter()
                .zip(&c.positives)
                .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
                .collect()
        }
        GroupAggregation::Macro => {
            let a = groups.num_groups();
            let mut sum = vec![0.0; a];
            let mut users = vec![0usize; a];
            for l in lists {
                let mut pos = vec![0usize; a];
                let mut hit = vec![0usize; a];
                for &i in test.positives(l.user) {
                    pos[groups.group_of(i)] += 1;
                }
                for (_, i) in hits_in(l, test, k) {
                    hit[groups.group_of(i)] += 1;
                }
                for g in 0..a {
                    if pos[g] > 0 {
                        sum[g] += hit[g] as f64 / pos[g] as f64;
                        users[g] += 1;
                    }
                }
            }
            sum.iter()
                .zip(&users)
                .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                .collect()
        }
    }
}

/// Relative standard deviation (population std over mean) of group
/// recalls. `None` with fewer than two groups or a zero mean.
pub fn recall_disp(recalls: &[f64]) -> Option<f64> {
    if recalls.len() < 2 {
        return None;
    }
    let n = recalls.len() as f64;
    let mean = recalls.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = recalls.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

pub fn recall_min(recalls: &[f64]) -> Option<f64> {
    recalls.iter().copied().reduce(f64::min)
}

/// Macro-average over groups.
pub fn recall_avg(recalls: &[f64]) -> Option<f64> {
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// All utility and fairness metrics at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub users: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub f1: f64,
    /// Pooled hits over pooled test positives; equals the positive-weighted
    /// mean of the micro group recalls.
    pub recall_pooled: f64,
    pub group_labels: Vec<String>,
    pub group_recall: Vec<Option<f64>>,
    pub group_aggregation: GroupAggregation,
    /// `None` when fewer than two groups are defined or their mean is zero.
    pub recall_disp: Option<f64>,
    pub recall_min: Option<f64>,
    pub recall_avg: Option<f64>,
    /// Groups with no test positives, left out of Disp/Min/Avg.
    pub undefined_groups: Vec<String>,
}

impl MetricReport {
    pub fn from_lists(
        lists: &[RankedList],
        test: &InteractionTable,
        groups: &GroupMap,
        k: usize,
        aggregation: GroupAggregation,
    ) -> Self {
        let precision = precision_at_k(lists, test, k);
        let recall = recall_at_k(lists, test, k);
        let counts = group_counts(lists, test, groups, k);
        let total_pos: usize = counts.positives.iter().sum();
        let recall_pooled = if total_pos == 0 {
            0.0
        } else {
            counts.hits.iter().sum::<usize>() as f64 / total_pos as f64
        };
        let group_recall = group_recall_at_k(lists, test, groups, k, aggregation);
        let defined: Vec<f64> = group_recall.iter().flatten().copied().collect();
        let undefined_groups = group_recall
            .iter()
            .zip(groups.labels())
            .filter(|(r, _)| r.is_none())
            .map(|(_, l)| l.clone())
            .collect();
        MetricReport {
            k,
            users: lists.len(),
            precision,
            recall,
            ndcg: ndcg_at_k(lists, test, k),
            f1: f1(precision, recall),
            recall_pooled,
            group_labels: groups.labels().to_vec(),
            group_recall,
            group_aggregation: aggregation,
            recall_disp: recall_disp(&defined),
            recall_min: recall_min(&defined),
            recall_avg: recall_avg(&defined),
            undefined_groups,
        }
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "k", "users", "recall_disp", "recall_min", "recall_avg", "ndcg", "precision", "recall", "f1", "recall_pooled",
        ]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
        cols.extend(self.group_labels.iter().map(|l| format!("recall[{l}]")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        let mut cols = vec![
            self.k.to_string(),
            self.users.to_string(),
            opt(self.recall_disp),
            opt(self.recall_min),
            opt(self.recall_avg),
            self.ndcg.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
            self.recall_pooled.to_string(),
        ];
        cols.extend(self.group_recall.iter().map(|r| opt(*r)));
        cols.join(",")
    }

    /// Writes `report_k{k}.csv` and `report_k{k}.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join(format!("report_k{}.csv", self.k));
        fs::write(&csv, format!("{}\n{}\n", self.csv_header(), self.csv_row())).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("report_k{}.json", self.k));
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Test-time evaluation: masks train and validation positives and reports
/// every metric at each `k`.
pub fn evaluate(
    emb: &Embeddings<'_>,
    train: &InteractionTable,
    validation: &InteractionTable,
    test: &InteractionTable,
    groups: &GroupMap,
    ks: &[usize],
    aggregation: GroupAggregation,
) -> Result<Vec<MetricReport>> {
    let max_k = ks.iter().copied().max().ok_or_else(|| Error::Config("no k values".into()))?;
    let lists = topk_recommend(emb, &[train, validation], test, max_k)?;
    Ok(ks
        .iter()
        .map(|&k| MetricReport::from_lists(&lists, test, groups, k, aggregation))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;

    fn table(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> InteractionTable {
        InteractionTable::new(num_users, num_items, pairs.iter().map(|&(user, item)| Interaction { user, item })).unwrap()
    }

    fn list(user: usize, items: &[usize]) -> RankedList {
        RankedList {
            user,
            items: items.to_vec(),
            scores: (0..items.len()).map(|r| -(r as f64)).collect(),
        }
    }

    #[test]
    fn masking_and_sorting() {
        let train = table(1, 3, &[(0, 0)]);
        let top = rank_items(&[9.0, 5.0, 7.0], |i| train.contains(0, i), 2);
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn ties_prefer_small_indices() {
        let top = rank_items(&[1.0; 6], |i| i == 1, 2);
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn short_catalog_truncates() {
        let top = rank_items(&[1.0, 2.0], |_| false, 5);
        assert_eq!(top.len(), 2);
    }

    #[test]
    fn users_without_test_positives_are_skipped() {
        let emb_users = ndarray::array![[1.0], [1.0]];
        let emb_items = ndarray::array![[1.0], [2.0]];
        let emb = Embeddings {
            users: std::borrow::Cow::Owned(emb_users),
            items: std::borrow::Cow::Owned(emb_items),
        };
        let test = table(2, 2, &[(1, 0)]);
        let lists = topk_recommend(&emb, &[], &test, 1).unwrap();
        assert_eq!(lists.len(), 1);
        assert_eq!(lists[0].user, 1);
    }

    #[test]
    fn perfect_single_hit() {
        let test = table(1, 30, &[(0, 4)]);
        let mut items = vec![4];
        items.extend(10..29);
        let lists = vec![list(0, &items)];
        assert_eq!(recall_at_k(&lists, &test, 20), 1.0);
        assert_eq!(ndcg_at_k(&lists, &test, 20), 1.0);
        assert!((precision_at_k(&lists, &test, 20) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn no_hits_gives_zeros() {
        let test = table(1, 10, &[(0, 9)]);
        let lists = vec![list(0, &[0, 1, 2])];
        assert_eq!(recall_at_k(&lists, &test, 3), 0.0);
        assert_eq!(precision_at_k(&lists, &test, 3), 0.0);
        assert_eq!(ndcg_at_k(&lists, &test, 3), 0.0);
        assert_eq!(f1_at_k(&lists, &test, 3), 0.0);
    }

    #[test]
    fn ndcg_hand_example() {
        let test = table(1, 10, &[(0, 1), (0, 3)]);
        let lists = vec![list(0, &[1, 7, 3])];
        let dcg = 1.0 + 1.0 / 4f64.log2();
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((dcg - 1.5).abs() < 1e-15);
        assert!((idcg - 1.6309).abs() < 1e-4);
        let n = ndcg_at_k(&lists, &test, 3);
        assert!((n - dcg / idcg).abs() < 1e-12);
        assert!((n - 0.9198).abs() < 1e-4);
        assert_eq!(recall_at_k(&lists, &test, 3), 1.0);
    }

    #[test]
    fn group_recall_counts() {
        let groups = GroupMap::new(vec![0, 0, 0, 0, 1, 1], vec!["a".into(), "b".into()]).unwrap();
        let test = table(2, 6, &[(0, 0), (0, 1), (1, 2), (1, 3), (0, 4)]);
        let lists = vec![list(0, &[0, 4]), list(1, &[5, 5])];
        let r = group_recall_at_k(&lists, &test, &groups, 2, GroupAggregation::Micro);
        assert_eq!(r, vec![Some(0.25), Some(1.0)]);

        let single = vec![list(0, &[0, 4])];
        let r = group_recall_at_k(&single, &test, &groups, 2, GroupAggregation::Micro);
        assert_eq!(r, vec![Some(0.5), Some(1.0)]);
    }

    #[test]
    fn group_without_test_positives_is_flagged() {
        let groups = GroupMap::new(vec![0, 1], vec!["a".into(), "b".into()]).unwrap();
        let test = table(1, 2, &[(0, 0)]);
        let lists = vec![list(0, &[0])];
        let rep = MetricReport::from_lists(&lists, &test, &groups, 1, GroupAggregation::Micro);
        assert_eq!(rep.group_recall, vec![Some(1.0), None]);
        assert_eq!(rep.undefined_groups, vec!["b".to_string()]);
        assert_eq!(rep.recall_disp, None);
        assert_eq!(rep.recall_min, Some(1.0));
    }

    #[test]
    fn disp_min_avg_examples() {
        assert_eq!(recall_disp(&[0.4, 0.4]), Some(0.0));
        assert_eq!(recall_min(&[0.4, 0.4]), Some(0.4));
        assert_eq!(recall_avg(&[0.4, 0.4]), Some(0.4));
        let d = recall_disp(&[0.2, 0.4]).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_disp(&[0.0, 0.0]), None);
    }

    #[test]
    fn macro_aggregation_averages_users() {
        let groups = GroupMap::new(vec![0, 0, 0], vec!["a".into()]).unwrap();
        let test = table(2, 3, &[(0, 0), (1, 1), (1, 2)]);
        let lists = vec![list(0, &[0]), list(1, &[1])];
        let micro = group_recall_at_k(&lists, &test, &groups, 1, GroupAggregation::Micro);
        let macro_ = group_recall_at_k(&lists, &test, &groups, 1, GroupAggregation::Macro);
        assert_eq!(micro, vec![Some(2.0 / 3.0)]);
        assert_eq!(macro_, vec![Some(0.75)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn two_group_disp_closed_form(a in 0.0f64..1.0, b in 0.0f64..1.0) {
                prop_assume!(a + b > 0.0);
                let d = recall_disp(&[a, b]).unwrap();
                prop_assert!((d - (a - b).abs() / (a + b)).abs() < 1e-12);
            }

            #[test]
            fn disp_scale_invariant(r in prop::collection::vec(0.01f64..1.0, 2..6), c in 0.1f64..10.0) {
                let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
                prop_assert!((recall_disp(&r).unwrap() - recall_disp(&scaled).unwrap()).abs() < 1e-9);
                prop_assert!(recall_min(&r).unwrap() <= recall_avg(&r).unwrap() + 1e-15);
            }

            #[test]
            fn rank_only_dependence(scores in prop::collection::vec(-3.0f64..3.0, 12), k in 1usize..12) {
                let a = rank_items(&scores, |i| i % 5 == 0, k);
                let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
                let b = rank_items(&transformed, |i| i % 5 == 0, k);
                let ia: Vec<usize> = a.iter().map(|t| t.0).collect();
                let ib: Vec<usize> = b.iter().map(|t| t.0).collect();
                prop_assert_eq!(ia, ib);
            }
        }
    }
}
