//! Full-catalog ranking, HR@N / NDCG@N and per-group reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbones::{score_all, Recommender};
use crate::catalog::{cold_new_partition, DatasetSplit};
use crate::encoders::ItemData;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 1-based rank of `target`: one plus the items scoring strictly higher, plus
/// the items with an equal score and a lower index.
pub fn full_rank<T: PartialOrd + Copy>(scores: &[T], target: usize) -> Result<usize> {
    full_rank_excluding(scores, target, &[])
}

/// As [`full_rank`], ignoring the items in `exclude` (the target itself is never excluded).
pub fn full_rank_excluding<T: PartialOrd + Copy>(scores: &[T], target: usize, exclude: &[usize]) -> Result<usize> {
    let Some(&t) = scores.get(target) else {
        return Err(Error::Bounds {
            what: "target item",
            index: target,
            len: scores.len(),
        });
    };
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if j != target && (s > t || (s == t && j < target)) {
            rank += 1;
        }
    }
    if !exclude.is_empty() {
        let skip: HashSet<usize> = exclude.iter().copied().filter(|&j| j != target).collect();
        for j in skip {
            if let Some(&s) = scores.get(j) {
                if s > t || (s == t && j < target) {
                    rank -= 1;
                }
            }
        }
    }
    Ok(rank)
}

pub fn hr_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Named user subsets, `overall` first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalGroups {
    pub groups: Vec<(String, Vec<usize>)>,
}

impl EvalGroups {
    pub fn overall(num_users: usize) -> Self {
        EvalGroups {
            groups: vec![("overall".into(), (0..num_users).collect())],
        }
    }

    /// Overall, then `warm-K` for each K (users whose test target has at least
    /// K interactions in `original_counts`), then the cold/new/other partition
    /// of test targets by training occurrences.
    pub fn build(split: &DatasetSplit, original_counts: &[usize], warm_ks: &[usize]) -> Self {
        let mut g = Self::overall(split.num_users());
        for &k in warm_ks {
            let users = (0..split.num_users())
                .filter(|&u| original_counts.get(split.test[u]).copied().unwrap_or(0) >= k)
                .collect();
            g.groups.push((format!("warm-{k}"), users));
        }
        let p = cold_new_partition(&split.train, &split.test, split.num_items);
        g.groups.push(("cold".into(), p.cold));
        g.groups.push(("new".into(), p.new));
        g.groups.push(("other".into(), p.other));
        g
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, u)| u.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub n: usize,
    pub exclude_history: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n: 10,
            exclude_history: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub users: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub n: usize,
    pub groups: Vec<GroupMetrics>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl RankingReport {
    /// Averages per-user metrics of `ranks` (indexed by user) over each group.
    pub fn from_ranks(ranks: &[usize], groups: &EvalGroups, n: usize) -> Self {
        let mut out = RankingReport {
            n,
            groups: Vec::new(),
            notes: Vec::new(),
            meta: BTreeMap::new(),
        };
        for (name, users) in &groups.groups {
            if users.is_empty() {
                out.notes.push(format!("group {name} is empty and omitted"));
                continue;
            }
            let hr: f64 = users.iter().map(|&u| hr_at_n(ranks[u], n)).sum();
            let ndcg: f64 = users.iter().map(|&u| ndcg_at_n(ranks[u], n)).sum();
            let k = users.len() as f64;
            out.groups.push(GroupMetrics {
                group: name.clone(),
                users: users.len(),
                hr: hr / k,
                ndcg: ndcg / k,
            });
        }
        out
    }

    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "group\tusers\thr@{0}\tndcg@{0}", self.n);
        for g in &self.groups {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", g.group, g.users, g.hr, g.ndcg);
        }
        for note in &self.notes {
            let _ = writeln!(s, "# note: {note}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Ranks each user's target given a batch scorer that returns one row of `m`
/// scores per requested user.
pub fn rank_targets(
    users: &[usize],
    targets: &[usize],
    histories: &[Vec<usize>],
    opts: EvalOptions,
    mut scorer: impl FnMut(&[usize]) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let mut ranks = vec![0; targets.len()];
    for chunk in users.chunks(CHUNK) {
        let rows = scorer(chunk)?;
        for (&u, row) in chunk.iter().zip(&rows) {
            let excl: &[usize] = if opts.exclude_history { &histories[u] } else { &[] };
            ranks[u] = full_rank_excluding(row, targets[u], excl)?;
        }
    }
    Ok(ranks)
}

/// Histories and targets of every user for the given protocol.
pub fn protocol(split: &DatasetSplit, target: Target) -> (Vec<Vec<usize>>, Vec<usize>) {
    match target {
        Target::Valid => (split.train.clone(), split.valid.clone()),
        Target::Test => ((0..split.num_users()).map(|u| split.test_history(u)).collect(), split.test.clone()),
    }
}

/// Ranks of the validation or test target of every user under `model`.
pub fn model_ranks<T: Scalar>(
    model: &Recommender<T>,
    split: &DatasetSplit,
    data: &ItemData<T>,
    target: Target,
    opts: EvalOptions,
) -> Result<Vec<usize>> {
    let (histories, targets) = protocol(split, target);
    let items = model.item_vectors(data)?;
    let users: Vec<usize> = (0..split.num_users()).collect();
    rank_targets(&users, &targets, &histories, opts, |chunk| {
        let hist: Vec<Vec<usize>> = chunk.iter().map(|&u| histories[u].clone()).collect();
        let uv = model.user_vectors(chunk, &hist, &items)?;
        Ok(score_rows(&score_all(&uv, &items)?))
    })
}

pub fn evaluate<T: Scalar>(
    model: &Recommender<T>,
    split: &DatasetSplit,
    data: &ItemData<T>,
    groups: &EvalGroups,
    target: Target,
    opts: EvalOptions,
) -> Result<RankingReport> {
    let ranks = model_ranks(model, split, data, target, opts)?;
    Ok(RankingReport::from_ranks(&ranks, groups, opts.n))
}

pub(crate) fn score_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let (rows, _) = t.dims2();
    (0..rows)
        .map(|r| t.row(r).iter().map(|x| x.to_f64_lossy()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rule() {
        let s = [0.5; 5];
        assert_eq!(full_rank(&s, 0).unwrap(), 1);
        assert_eq!(full_rank(&s, 4).unwrap(), 5);
        assert_eq!(full_rank(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert!(matches!(full_rank(&s, 5), Err(Error::Bounds { .. })));
    }

    #[test]
    fn exclusion_skips_history_but_not_target() {
        let s = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(full_rank_excluding(&s, 3, &[0, 3]).unwrap(), 3);
        assert_eq!(full_rank_excluding(&s, 3, &[0, 0, 1]).unwrap(), 2);
    }

    #[test]
    fn metric_values() {
        assert_eq!(hr_at_n(1, 10), 1.0);
        assert_eq!(hr_at_n(10, 10), 1.0);
        assert_eq!(hr_at_n(11, 10), 0.0);
        assert_eq!(ndcg_at_n(1, 10), 1.0);
        assert_eq!(ndcg_at_n(3, 10), 0.5);
        assert!((ndcg_at_n(10, 10) - 2f64.ln() / 11f64.ln()).abs() < 1e-15);
        assert!((ndcg_at_n(10, 10) - 0.289_065).abs() < 1e-6);
        assert_eq!(ndcg_at_n(11, 10), 0.0);
    }

    #[test]
    fn empty_group_is_omitted_with_note() {
        let g = EvalGroups {
            groups: vec![("overall".into(), vec![0, 1]), ("new".into(), vec![])],
        };
        let r = RankingReport::from_ranks(&[1, 20], &g, 10);
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].hr, 0.5);
        assert_eq!(r.notes.len(), 1);
        assert!(r.to_tsv().contains("overall\t2\t0.500000\t0.500000"));
    }
}
