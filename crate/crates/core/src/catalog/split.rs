use super::{InteractionLog, MIN_SPLIT_LEN};
use crate::error::{Error, Result};

/// Test targets with fewer training occurrences than this are cold (or new at zero).
pub const COLD_THRESHOLD: usize = 10;

/// Leave-one-out split: per user, all but the last two items train, the
/// second-to-last validates and the last is the test target.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub num_items: usize,
}

impl DatasetSplit {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    /// History used when predicting the validation item.
    pub fn valid_history(&self, user: usize) -> &[usize] {
        &self.train[user]
    }

    /// History used when predicting the test item (train followed by valid).
    pub fn test_history(&self, user: usize) -> Vec<usize> {
        let mut h = self.train[user].clone();
        h.push(self.valid[user]);
        h
    }

    /// Occurrences of each item over all training sequences.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_items];
        for seq in &self.train {
            for &i in seq {
                c[i] += 1;
            }
        }
        c
    }
}

pub fn leave_one_out_split(log: &InteractionLog) -> Result<DatasetSplit> {
    let mut train = Vec::with_capacity(log.num_users());
    let mut valid = Vec::with_capacity(log.num_users());
    let mut test = Vec::with_capacity(log.num_users());
    for (u, seq) in log.sequences().iter().enumerate() {
        if seq.len() < MIN_SPLIT_LEN {
            return Err(Error::contract(format!(
                "user {} has {} interactions; leave-one-out needs {MIN_SPLIT_LEN}",
                log.user_keys()[u],
                seq.len()
            )));
        }
        let n = seq.len();
        train.push(seq[..n - 2].iter().map(|x| x.item).collect());
        valid.push(seq[n - 2].item);
        test.push(seq[n - 1].item);
    }
    Ok(DatasetSplit {
        train,
        valid,
        test,
        num_items: log.num_items(),
    })
}

/// User indices grouped by how often their test target occurs in training.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ColdNewPartition {
    pub cold: Vec<usize>,
    pub new: Vec<usize>,
    pub other: Vec<usize>,
}

pub fn cold_new_partition(train: &[Vec<usize>], test: &[usize], num_items: usize) -> ColdNewPartition {
    let mut counts = vec![0usize; num_items];
    for seq in train {
        for &i in seq {
            counts[i] += 1;
        }
    }
    let mut p = ColdNewPartition::default();
    for (u, &t) in test.iter().enumerate() {
        match counts.get(t).copied().unwrap_or(0) {
            0 => p.new.push(u),
            c if c < COLD_THRESHOLD => p.cold.push(u),
            _ => p.other.push(u),
        }
    }
    p
}
