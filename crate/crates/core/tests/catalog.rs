use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recbench::catalog::{
    cold_new_partition, leave_one_out_split, truncate_user_sequences, warm_k_filter, InteractionLog,
};

/// Users with 3..=40 interactions over a skewed catalog, so that every warm
/// threshold removes some items and keeps others.
fn random_log(users: usize, items: usize, seed: u64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..users)
        .map(|_| {
            let len = rng.random_range(3..=40);
            (0..len)
                .map(|_| {
                    let x: f64 = rng.random();
                    ((x * x * x) * items as f64) as usize
                })
                .collect()
        })
        .collect();
    InteractionLog::from_item_sequences(seqs, items).unwrap()
}

fn keyed_sequences(log: &InteractionLog) -> Vec<(String, Vec<String>)> {
    log.sequences()
        .iter()
        .zip(log.user_keys())
        .map(|(s, u)| (u.clone(), s.iter().map(|x| log.item_keys()[x.item].clone()).collect()))
        .collect()
}

#[test]
fn split_concatenation_reconstructs_every_sequence() {
    let log = random_log(1000, 300, 1);
    let split = leave_one_out_split(&log).unwrap();
    assert_eq!(split.valid.len(), 1000);
    assert_eq!(split.test.len(), 1000);
    for u in 0..1000 {
        let mut joined = split.train[u].clone();
        joined.push(split.valid[u]);
        joined.push(split.test[u]);
        assert_eq!(joined, log.item_sequence(u));
    }
}

fn brute_force_warm(log: &InteractionLog, k: usize) -> Vec<(String, Vec<String>)> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for (_, seq) in keyed_sequences(log) {
        for key in seq {
            *counts.entry(key).or_default() += 1;
        }
    }
    keyed_sequences(log)
        .into_iter()
        .map(|(u, seq)| (u, seq.into_iter().filter(|key| counts[key] >= k).collect::<Vec<_>>()))
        .filter(|(_, seq)| seq.len() >= 3)
        .collect()
}

#[test]
fn warm_filters_match_brute_force_counting() {
    let log = random_log(1000, 300, 2);
    for k in [20, 50, 200] {
        let fast = warm_k_filter(&log, k);
        let slow = brute_force_warm(&log, k);
        assert!(!slow.is_empty() && slow.len() <= 1000, "k={k}");
        assert_eq!(keyed_sequences(&fast), slow, "k={k}");
        assert_eq!(fast.num_items(), fast.item_counts().iter().filter(|&&c| c > 0).count());
    }
}

#[test]
fn toy_counts_keep_the_two_popular_items() {
    // counts {3, 7, 20, 21}
    let mut seqs = vec![Vec::new(); 7];
    let put = |item: usize, n: usize, seqs: &mut Vec<Vec<usize>>| {
        for j in 0..n {
            seqs[j % 7].push(item);
        }
    };
    put(0, 3, &mut seqs);
    put(1, 7, &mut seqs);
    put(2, 20, &mut seqs);
    put(3, 21, &mut seqs);
    let log = InteractionLog::from_item_sequences(seqs, 4).unwrap();
    let kept = warm_k_filter(&log, 20);
    let mut keys = kept.item_keys().to_vec();
    keys.sort();
    assert_eq!(keys, ["i2", "i3"]);
}

#[test]
fn warm_filter_is_idempotent_when_nothing_more_falls_below() {
    let log = random_log(400, 100, 3);
    let once = warm_k_filter(&log, 1);
    assert_eq!(keyed_sequences(&once), keyed_sequences(&log));
    assert_eq!(keyed_sequences(&warm_k_filter(&log, 0)), keyed_sequences(&log));
}

#[test]
fn indices_are_contiguous_after_filtering() {
    let log = random_log(500, 200, 4);
    let f = warm_k_filter(&log, 30);
    let counts = f.item_counts();
    assert!(counts.iter().all(|&c| c > 0));
    assert_eq!(f.user_keys().len(), f.num_users());
}

#[test]
fn truncation_after_filtering_bounds_every_user() {
    let log = random_log(300, 100, 5);
    for max_len in [13, 23] {
        let t = truncate_user_sequences(&warm_k_filter(&log, 5), max_len).unwrap();
        assert!(t.sequences().iter().all(|s| s.len() <= max_len));
    }
}

#[test]
fn cold_new_other_partition_the_test_set() {
    let log = random_log(800, 400, 6);
    let split = leave_one_out_split(&log).unwrap();
    let p = cold_new_partition(&split.train, &split.test, split.num_items);
    let counts = split.train_counts();
    let mut seen = vec![0u8; split.num_users()];
    for (group, users) in [("cold", &p.cold), ("new", &p.new), ("other", &p.other)] {
        for &u in users {
            seen[u] += 1;
            let c = counts[split.test[u]];
            let expected = match c {
                0 => "new",
                1..=9 => "cold",
                _ => "other",
            };
            assert_eq!(group, expected, "user {u}, target count {c}");
        }
    }
    assert!(seen.iter().all(|&s| s == 1));
}

#[test]
fn synthetic_histogram_is_sorted_descending() {
    let g = recbench::synthgen::generate(&recbench::synthgen::GenConfig::default()).unwrap();
    let hist = g.log.popularity_histogram();
    assert!(hist.windows(2).all(|w| w[0].1 >= w[1].1));
    assert_eq!(hist.iter().map(|h| h.1).sum::<usize>(), g.log.num_interactions());
}
