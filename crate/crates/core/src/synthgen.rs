//! Synthetic catalogs whose interactions are driven by latent item topics.
//!
//! Items carry a latent `z_i ~ N(0, I_T)`; titles are drawn from topic-specific
//! vocabulary blocks with mixture weights `softmax(κ z_i)`, and the dense
//! feature vector is `z_i` plus Gaussian noise. Users carry `w_u ~ N(0, I_T)`
//! and pick items without replacement with probability proportional to
//! `exp(w_u · z_i / τ) · pop_i`, where `pop_i` follows a Zipf law over a random
//! popularity order. Draw order is chronology.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{write_interactions, write_items, DatasetSplit, Interaction, InteractionLog, ItemContent, COLD_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::{rank_targets, EvalGroups, EvalOptions, RankingReport};

/// Most occurrences a cold item may have in the whole log.
pub const COLD_CAP: usize = COLD_THRESHOLD - 1;
/// Occurrences of each cold item kept back for users' final interactions.
const COLD_FINAL_RESERVE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    pub title_tokens: usize,
    pub vocab: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub cold_fraction: f64,
    /// Items that only ever appear as a user's final interaction.
    pub new_fraction: f64,
    /// Probability that a user's final interaction is drawn from the cold and new items.
    pub cold_target_rate: f64,
    pub zipf: f64,
    pub tau: f64,
    /// Mixture sharpness κ of the title topic weights.
    pub topic_sharpness: f64,
    /// Probability that a title token is uniform over the whole vocabulary.
    pub title_noise: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            users: 2000,
            items: 500,
            topics: 8,
            title_tokens: 8,
            vocab: 800,
            min_interactions: 20,
            max_interactions: 40,
            cold_fraction: 0.1,
            new_fraction: 0.02,
            cold_target_rate: 0.2,
            zipf: 1.0,
            tau: 1.0,
            topic_sharpness: 4.0,
            title_noise: 0.05,
            feature_noise: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.users == 0 || self.items == 0 || self.topics == 0 || self.title_tokens == 0 {
            return bad("users, items, topics and title_tokens must be positive".into());
        }
        if self.topics > self.vocab {
            return bad(format!("{} topics cannot partition a vocabulary of {}", self.topics, self.vocab));
        }
        if !(0.0..1.0).contains(&self.cold_fraction) || !(0.0..1.0).contains(&self.new_fraction) {
            return bad("cold and new fractions must lie in [0, 1)".into());
        }
        if self.cold_fraction + self.new_fraction >= 1.0 {
            return bad("cold and new items would leave no regular items".into());
        }
        if !(0.0..=1.0).contains(&self.cold_target_rate) || !(0.0..=1.0).contains(&self.title_noise) {
            return bad("rates must lie in [0, 1]".into());
        }
        if self.min_interactions < 3 || self.min_interactions > self.max_interactions {
            return bad(format!(
                "interaction range {}..={} is empty or below 3",
                self.min_interactions, self.max_interactions
            ));
        }
        let (cold, new) = self.special_counts();
        if self.max_interactions > self.items - new {
            return bad(format!(
                "{} interactions per user exceed the {} items available",
                self.max_interactions,
                self.items - new
            ));
        }
        let regular = self.items - cold - new;
        if self.max_interactions > regular {
            return bad("too few regular items for the longest user".into());
        }
        if self.tau <= 0.0 || self.feature_noise < 0.0 || self.zipf < 0.0 {
            return bad("tau must be positive; noise and skew non-negative".into());
        }
        Ok(())
    }

    fn special_counts(&self) -> (usize, usize) {
        let cold = (self.cold_fraction * self.items as f64).round() as usize;
        let new = (self.new_fraction * self.items as f64).round() as usize;
        (cold, new)
    }

    /// First vocabulary word of topic `k`'s block, and the block size.
    pub fn topic_block(&self, k: usize) -> (usize, usize) {
        let size = self.vocab / self.topics;
        (k * size, size)
    }
}

/// Everything the generator knew; never part of a model's input.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub item_z: Vec<Vec<f64>>,
    pub user_w: Vec<Vec<f64>>,
    pub log_popularity: Vec<f64>,
    pub tau: f64,
    pub cold_items: Vec<usize>,
    pub new_items: Vec<usize>,
    /// Generator word ids of every title.
    pub title_words: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// `w_u · z_i / τ + log pop_i`, the log of the unnormalised choice weight.
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self.user_w[user].iter().zip(&self.item_z[item]).map(|(a, b)| a * b).sum();
        dot / self.tau + self.log_popularity[item]
    }

    /// Probability of each item being a user's first choice.
    pub fn choice_probabilities(&self, user: usize) -> Vec<f64> {
        let a: Vec<f64> = (0..self.item_z.len()).map(|i| self.affinity(user, i)).collect();
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = a.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Re-indexes items and users to the dense order of `log`, whose keys must
    /// be the generator's `i{index}` / `u{index}` keys.
    pub fn align(&self, log: &InteractionLog) -> Result<GroundTruth> {
        let parse = |key: &str, prefix: char, len: usize| -> Result<usize> {
            key.strip_prefix(prefix)
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k < len)
                .ok_or_else(|| Error::config(format!("key `{key}` was not produced by the generator")))
        };
        let items = log
            .item_keys()
            .iter()
            .map(|k| parse(k, 'i', self.item_z.len()))
            .collect::<Result<Vec<_>>>()?;
        let users = log
            .user_keys()
            .iter()
            .map(|k| parse(k, 'u', self.user_w.len()))
            .collect::<Result<Vec<_>>>()?;
        let back = |orig: &[usize]| -> Vec<usize> {
            orig.iter().filter_map(|o| items.iter().position(|i| i == o)).collect()
        };
        Ok(GroundTruth {
            item_z: items.iter().map(|&i| self.item_z[i].clone()).collect(),
            user_w: users.iter().map(|&u| self.user_w[u].clone()).collect(),
            log_popularity: items.iter().map(|&i| self.log_popularity[i]).collect(),
            tau: self.tau,
            cold_items: back(&self.cold_items),
            new_items: back(&self.new_items),
            title_words: items.iter().map(|&i| self.title_words[i].clone()).collect(),
        })
    }

    /// `item_index<TAB>z_1,...,z_T` per item.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# item_index\tz\n");
        for (i, z) in self.item_z.iter().enumerate() {
            let v: Vec<String> = z.iter().map(|x| format!("{x:.6}")).collect();
            s.push_str(&format!("{i}\t{}\n", v.join(",")));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub items: Vec<ItemContent>,
    pub log: InteractionLog,
    pub truth: GroundTruth,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index drawn with probability proportional to `weights` (all non-negative,
/// at least one positive).
fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Title word ids for an item with latent `z`.
pub fn title_words(cfg: &GenConfig, z: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let mix = softmax(&z.iter().map(|v| cfg.topic_sharpness * v).collect::<Vec<_>>());
    (0..cfg.title_tokens)
        .map(|_| {
            if rng.random::<f64>() < cfg.title_noise {
                rng.random_range(0..cfg.vocab)
            } else {
                let (start, size) = cfg.topic_block(draw(&mix, rng));
                start + rng.random_range(0..size)
            }
        })
        .collect()
}

/// Zipf popularity over a random order: the item at popularity rank `r`
/// (1-based) gets weight `r^-s`. Returns log-weights.
pub fn zipf_log_popularity(m: usize, s: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut lp = vec![0.0; m];
    for (r, &i) in order.iter().enumerate() {
        lp[i] = -s * ((r + 1) as f64).ln();
    }
    lp
}

pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, n, t) = (cfg.items, cfg.users, cfg.topics);
    let item_z: Vec<Vec<f64>> = (0..m).map(|_| normal_vec(&mut rng, t)).collect();
    let user_w: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, t)).collect();
    let log_pop = zipf_log_popularity(m, cfg.zipf, &mut rng);
    let words: Vec<Vec<usize>> = item_z.iter().map(|z| title_words(cfg, z, &mut rng)).collect();
    let features: Vec<Vec<f64>> = item_z
        .iter()
        .map(|z| z.iter().map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + cfg.feature_noise * e
        }).collect::<Vec<f64>>())
        .collect();

    let (n_cold, n_new) = cfg.special_counts();
    let mut special: Vec<usize> = (0..m).collect();
    special.shuffle(&mut rng);
    let mut cold_items = special[..n_cold].to_vec();
    let mut new_items = special[n_cold..n_cold + n_new].to_vec();
    cold_items.sort_unstable();
    new_items.sort_unstable();
    let mut kind = vec![0u8; m];
    for &i in &cold_items {
        kind[i] = 1;
    }
    for &i in &new_items {
        kind[i] = 2;
    }

    let truth = GroundTruth {
        item_z,
        user_w,
        log_popularity: log_pop,
        tau: cfg.tau,
        cold_items,
        new_items,
        title_words: words,
    };

    let mut cold_uses = vec![0usize; m];
    let mut seqs = Vec::with_capacity(n);
    for u in 0..n {
        let len = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let aff: Vec<f64> = (0..m).map(|i| truth.affinity(u, i)).collect();
        let mut taken = vec![false; m];
        let mut seq = Vec::with_capacity(len);
        let mut weights = vec![0.0; m];
        for step in 0..len {
            let last = step + 1 == len;
            let special_final = last && rng.random::<f64>() < cfg.cold_target_rate;
            let mut fill = |special_pool: bool| -> bool {
                let ok = |i: usize| {
                    !taken[i]
                        && match kind[i] {
                            0 => !special_pool,
                            1 => cold_uses[i] < if special_pool { COLD_CAP } else { COLD_CAP - COLD_FINAL_RESERVE },
                            _ => special_pool,
                        }
                };
                let top = (0..m).filter(|&i| ok(i)).map(|i| aff[i]).fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY {
                    return false;
                }
                for i in 0..m {
                    weights[i] = if ok(i) { (aff[i] - top).exp() } else { 0.0 };
                }
                true
            };
            if !(special_final && fill(true)) && !fill(false) {
                return Err(Error::config(format!("user {u} ran out of eligible items")));
            }
            let i = draw(&weights, &mut rng);
            taken[i] = true;
            if kind[i] == 1 {
                cold_uses[i] += 1;
            }
            seq.push(Interaction {
                item: i,
                timestamp: step as i64,
            });
        }
        seqs.push(seq);
    }

    let user_keys = (0..n).map(|u| format!("u{u}")).collect();
    let item_keys: Vec<String> = (0..m).map(|i| format!("i{i}")).collect();
    let log = InteractionLog::new(seqs, user_keys, item_keys.clone())?;
    let items = (0..m)
        .map(|i| ItemContent {
            key: item_keys[i].clone(),
            title: Some(truth.title_words[i].iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")),
            features: Some(features[i].clone()),
        })
        .collect();
    Ok(Generated { items, log, truth })
}

/// Writes `interactions.tsv`, `items.tsv` and `ground_truth.tsv` into `dir`.
pub fn write_generated(g: &Generated, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_interactions(&g.log, dir.join("interactions.tsv"))?;
    write_items(&g.items, dir.join("items.tsv"))?;
    fs::write(dir.join("ground_truth.tsv"), g.truth.to_tsv())?;
    Ok(())
}

/// Ranks each user's test target by true affinity; the ceiling for any model.
pub fn oracle_metrics(truth: &GroundTruth, split: &DatasetSplit, groups: &EvalGroups, opts: EvalOptions) -> Result<RankingReport> {
    let users: Vec<usize> = (0..split.num_users()).collect();
    let histories: Vec<Vec<usize>> = users.iter().map(|&u| split.test_history(u)).collect();
    let ranks = rank_targets(&users, &split.test, &histories, opts, |chunk| {
        Ok(chunk
            .iter()
            .map(|&u| (0..split.num_items).map(|i| truth.affinity(u, i)).collect())
            .collect())
    })?;
    Ok(RankingReport::from_ranks(&ranks, groups, opts.n))
}
