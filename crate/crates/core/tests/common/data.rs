//! Small synthetic datasets run through the standard preparation pipeline.

use recbench::experiment::{prepare, DataSource, ExperimentConfig, Prepared};
use recbench::synthgen::GenConfig;

pub fn synthetic_prepared(g: GenConfig) -> Prepared {
    let cfg = ExperimentConfig {
        data: DataSource::Synthetic(g),
        ..ExperimentConfig::default()
    };
    prepare(&cfg).unwrap()
}

pub fn small_gen(users: usize, items: usize, seed: u64) -> GenConfig {
    GenConfig {
        users,
        items,
        min_interactions: 8,
        max_interactions: 15,
        seed,
        ..GenConfig::default()
    }
}

pub fn small_prepared(users: usize, items: usize, seed: u64) -> Prepared {
    synthetic_prepared(small_gen(users, items, seed))
}
