// Brute-force references shared by the eval tests and the acceptance suite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use recbench::backbones::{BackboneSpec, DssmSpec, ModelSpec, Recommender, SasrecSpec};
use recbench::catalog::{leave_one_out_split, InteractionLog};
use recbench::encoders::{EncoderSpec, ItemData};
use recbench::eval::{evaluate, model_ranks, protocol, EvalGroups, EvalOptions, RankingReport, Target};

/// Rank by direct counting over the full score row: strictly greater scores
/// and equal scores at lower indices come first, excluded items never count.
pub fn brute_rank(row: &[f64], target: usize, exclude: &[usize]) -> usize {
    1 + (0..row.len())
        .filter(|&j| j != target && !exclude.contains(&j))
        .filter(|&j| row[j] > row[target] || (row[j] == row[target] && j < target))
        .count()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (InteractionLog, usize) {
    let n = rng.random_range(5..=200);
    let m = rng.random_range(5..=200);
    let seqs = (0..n)
        .map(|_| {
            let len = rng.random_range(3..=30);
            (0..len).map(|_| rng.random_range(0..m)).collect()
        })
        .collect();
    (InteractionLog::from_item_sequences(seqs, m).unwrap(), m)
}

/// Runs one random instance through `evaluate` and through the full n×m
/// score-matrix oracle; returns whether ranks and reports agree exactly.
pub fn evaluate_agrees_with_oracle(rng: &mut ChaCha8Rng, trial: u64) -> bool {
    let (log, m) = random_instance(rng);
    let split = leave_one_out_split(&log).unwrap();
    let groups = EvalGroups::build(&split, &log.item_counts(), &[3, 10]);
    let backbone = if trial % 2 == 0 {
        BackboneSpec::Sasrec(SasrecSpec {
            blocks: 1,
            heads: 2,
            max_len: 23,
        })
    } else {
        BackboneSpec::Dssm(DssmSpec { layers: 1 })
    };
    let spec = ModelSpec {
        d: 8,
        backbone,
        encoder: EncoderSpec::Id,
    };
    let data = ItemData::<f64>::ids_only(m);
    let model = Recommender::new(spec, split.num_users(), &data, trial).unwrap();
    let exclude_history = trial % 3 == 0;
    let opts = EvalOptions { n: 10, exclude_history };

    let items = model.item_vectors(&data).unwrap();
    let (histories, targets) = protocol(&split, Target::Test);
    let users: Vec<usize> = (0..split.num_users()).collect();
    let uv = model.user_vectors(&users, &histories, &items).unwrap();
    let mut oracle = Vec::with_capacity(users.len());
    for u in users {
        let row: Vec<f64> = (0..m)
            .map(|j| uv.row(u).iter().zip(items.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let excl: &[usize] = if exclude_history { &histories[u] } else { &[] };
        oracle.push(brute_rank(&row, targets[u], excl));
    }
    let ranks = model_ranks(&model, &split, &data, Target::Test, opts).unwrap();
    let report = evaluate(&model, &split, &data, &groups, Target::Test, opts).unwrap();
    let hits_match = report.groups.iter().all(|g| {
        let members = groups.get(&g.group).unwrap();
        let hits = members.iter().filter(|&&u| oracle[u] <= 10).count();
        g.hr == hits as f64 / members.len() as f64
    });
    ranks == oracle && report == RankingReport::from_ranks(&oracle, &groups, 10) && hits_match
}
