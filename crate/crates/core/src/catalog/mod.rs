//! Interaction logs, item content, filtering and the leave-one-out protocol.

mod io;
mod split;
mod tokenize;

pub use io::{
    load_interactions, load_items, parse_interactions, parse_items, write_histogram, write_interactions,
    write_items, ColumnSpec, ItemContent,
};
pub use split::{cold_new_partition, leave_one_out_split, ColdNewPartition, DatasetSplit, COLD_THRESHOLD};
pub use tokenize::{tokenize, Vocabulary, CLS_ID, MASK_ID, PAD_ID, SPECIAL_TOKENS, UNK_ID};

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default truncation for titles, in tokens (CLS excluded).
pub const MAX_TITLE_TOKENS: usize = 30;
/// Users with fewer interactions are dropped.
pub const MIN_USER_INTERACTIONS: usize = 5;
/// Minimum user length that keeps leave-one-out well defined.
pub const MIN_SPLIT_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub item: usize,
    pub timestamp: i64,
}

/// Per-user chronological interaction sequences over a dense item range.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    sequences: Vec<Vec<Interaction>>,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
}

impl InteractionLog {
    /// Builds a log from already-dense sequences; each is stably sorted by timestamp.
    pub fn new(mut sequences: Vec<Vec<Interaction>>, user_keys: Vec<String>, item_keys: Vec<String>) -> Result<Self> {
        if sequences.len() != user_keys.len() {
            return Err(Error::contract(format!(
                "{} sequences for {} user keys",
                sequences.len(),
                user_keys.len()
            )));
        }
        let m = item_keys.len();
        for seq in &mut sequences {
            if let Some(bad) = seq.iter().find(|x| x.item >= m) {
                return Err(Error::Bounds {
                    what: "item",
                    index: bad.item,
                    len: m,
                });
            }
            seq.sort_by_key(|x| x.timestamp);
        }
        Ok(InteractionLog {
            sequences,
            user_keys,
            item_keys,
        })
    }

    /// Log with generated keys `u{i}` / `i{j}`; convenient for tests and synthetic data.
    pub fn from_item_sequences(seqs: Vec<Vec<usize>>, num_items: usize) -> Result<Self> {
        let user_keys = (0..seqs.len()).map(|u| format!("u{u}")).collect();
        let item_keys = (0..num_items).map(|i| format!("i{i}")).collect();
        let sequences = seqs
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .enumerate()
                    .map(|(t, item)| Interaction {
                        item,
                        timestamp: t as i64,
                    })
                    .collect()
            })
            .collect();
        Self::new(sequences, user_keys, item_keys)
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn sequences(&self) -> &[Vec<Interaction>] {
        &self.sequences
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    pub fn item_sequence(&self, user: usize) -> Vec<usize> {
        self.sequences[user].iter().map(|x| x.item).collect()
    }

    pub fn item_sequences(&self) -> Vec<Vec<usize>> {
        (0..self.num_users()).map(|u| self.item_sequence(u)).collect()
    }

    /// Total interactions per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for seq in &self.sequences {
            for x in seq {
                counts[x.item] += 1;
            }
        }
        counts
    }

    /// Counts keyed by item key, so they survive re-indexing.
    pub fn item_counts_by_key(&self) -> HashMap<String, usize> {
        self.item_counts()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (self.item_keys[i].clone(), c))
            .collect()
    }

    /// Keeps the users for which `keep_user` holds and the items for which
    /// `keep_item` holds, then re-densifies both index ranges.
    fn retain(&self, keep_user: impl Fn(&[Interaction]) -> bool, keep_item: impl Fn(usize) -> bool) -> InteractionLog {
        let mut seqs = Vec::new();
        let mut users = Vec::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            let kept: Vec<Interaction> = seq.iter().copied().filter(|x| keep_item(x.item)).collect();
            if keep_user(&kept) {
                seqs.push(kept);
                users.push(self.user_keys[u].clone());
            }
        }
        let mut remap = vec![usize::MAX; self.num_items()];
        let mut items = Vec::new();
        for seq in &seqs {
            for x in seq {
                if remap[x.item] == usize::MAX {
                    remap[x.item] = 0;
                }
            }
        }
        for (i, slot) in remap.iter_mut().enumerate() {
            if *slot == 0 {
                *slot = items.len();
                items.push(self.item_keys[i].clone());
            }
        }
        for seq in &mut seqs {
            for x in seq.iter_mut() {
                x.item = remap[x.item];
            }
        }
        InteractionLog {
            sequences: seqs,
            user_keys: users,
            item_keys: items,
        }
    }

    /// Stable content hash of the log (keys, order, timestamps).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            for x in seq {
                h.update(self.user_keys[u].as_bytes());
                h.update([0]);
                h.update(self.item_keys[x.item].as_bytes());
                h.update([0]);
                h.update(x.timestamp.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-item interaction counts, most popular first (ties by index).
    pub fn popularity_histogram(&self) -> Vec<(usize, usize)> {
        popularity_histogram(&self.item_sequences(), self.num_items())
    }
}

/// Drops users with fewer than `k` interactions; indices are re-densified.
pub fn filter_min_interactions(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::contract("minimum interaction count must be at least 1"));
    }
    Ok(log.retain(|seq| seq.len() >= k, |_| true))
}

/// Keeps each user's `max_len` most recent interactions.
pub fn truncate_user_sequences(log: &InteractionLog, max_len: usize) -> Result<InteractionLog> {
    if max_len < MIN_SPLIT_LEN {
        return Err(Error::contract(format!(
            "max_len {max_len} leaves no training item after leave-one-out"
        )));
    }
    let mut out = log.clone();
    for seq in &mut out.sequences {
        if seq.len() > max_len {
            seq.drain(..seq.len() - max_len);
        }
    }
    Ok(out.retain(|_| true, |_| true))
}

/// Removes items with fewer than `k` interactions in `log` from every sequence,
/// then drops users left with fewer than three interactions.
pub fn warm_k_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    if k == 0 {
        return log.clone();
    }
    let counts = log.item_counts();
    log.retain(|seq| seq.len() >= MIN_SPLIT_LEN, |i| counts[i] >= k)
}

/// Exact per-item counts over training sequences, sorted descending.
pub fn popularity_histogram(train: &[Vec<usize>], num_items: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; num_items];
    for seq in train {
        for &i in seq {
            counts[i] += 1;
        }
    }
    let mut hist: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    hist.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    hist
}

/// Item content aligned to a log's dense item indices.
#[derive(Clone, Debug, Default)]
pub struct ItemRecords {
    /// Token ids per item, CLS first; empty when the item has no title.
    pub tokens: Vec<Vec<u32>>,
    /// Dense feature vectors per item, when every item has one.
    pub features: Option<Vec<Vec<f64>>>,
    pub vocab_size: usize,
}

impl ItemRecords {
    /// Tokenises titles with a vocabulary built from the aligned items and
    /// attaches feature vectors, for the items present in `log`.
    pub fn align(log: &InteractionLog, content: &[ItemContent], max_title_tokens: usize) -> Result<Self> {
        let by_key: HashMap<&str, &ItemContent> = content.iter().map(|c| (c.key.as_str(), c)).collect();
        let aligned: Vec<Option<&ItemContent>> =
            log.item_keys().iter().map(|k| by_key.get(k.as_str()).copied()).collect();
        let titles: Vec<&str> = aligned
            .iter()
            .map(|c| c.and_then(|c| c.title.as_deref()).unwrap_or(""))
            .collect();
        let vocab = Vocabulary::build(titles.iter().copied());
        let tokens = titles.iter().map(|t| vocab.tokenize(t, max_title_tokens)).collect();
        let features = if !aligned.is_empty() && aligned.iter().all(|c| c.is_some_and(|c| c.features.is_some())) {
            let feats: Vec<Vec<f64>> = aligned
                .iter()
                .map(|c| c.and_then(|c| c.features.clone()).unwrap_or_default())
                .collect();
            let width = feats[0].len();
            if let Some((i, f)) = feats.iter().enumerate().find(|(_, f)| f.len() != width) {
                return Err(Error::shape(format!(
                    "item {} has {} features, expected {width}",
                    log.item_keys()[i],
                    f.len()
                )));
            }
            Some(feats)
        } else {
            None
        };
        Ok(ItemRecords {
            tokens,
            features,
            vocab_size: vocab.len(),
        })
    }

    pub fn num_items(&self) -> usize {
        self.tokens.len()
    }

    pub fn has_text(&self) -> bool {
        self.tokens.iter().any(|t| t.len() > 1)
    }

    pub fn feature_width(&self) -> Option<usize> {
        self.features.as_ref().and_then(|f| f.first()).map(Vec::len)
    }
}
