use std::collections::BTreeMap;
use std::fs;

use recbench::eval::{GroupMetrics, RankingReport};
use recbench::experiment::{
    compare, evaluate_run, expand_grid, run_experiment, ExperimentConfig, RANKING_REPORT, RESOLVED_CONFIG,
};

fn tiny(dir: &std::path::Path) -> String {
    format!(
        "[synthetic]
users = 80
items = 30
min_interactions = 6
max_interactions = 10
title_tokens = 4
vocab = 40
topics = 4

[backbone]
d = 8
blocks = 1

[item_encoder]
text_width = 8
text_blocks = 1

[train]
epochs = 2
batch = 32
seed = 5

[output]
dir = {}
",
        dir.display()
    )
}

#[test]
fn grid_of_eight_runs_and_writes_one_directory_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{}
[grid]
backbone.type = sasrec, dssm
item_encoder.type = id, text_e2e, frozen, fusion
",
        tiny(tmp.path())
    );
    let cells = expand_grid(&text).unwrap();
    assert_eq!(cells.len(), 8);
    for c in &cells {
        let out = run_experiment(c).unwrap();
        assert!(out.dir.join(RANKING_REPORT).is_file());
        assert!(out.train.records.iter().all(|r| r.loss.is_finite()));
    }
    let dirs = fs::read_dir(tmp.path()).unwrap().count();
    assert_eq!(dirs, 8);
}

#[test]
fn repeated_runs_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str, encoder: &str| {
        let dir = tmp.path().join(sub);
        let cfg = ExperimentConfig::from_ini(&merge_encoder(&tiny(&dir), encoder)).unwrap();
        let out = run_experiment(&cfg).unwrap();
        let ranking = fs::read_to_string(out.dir.join(RANKING_REPORT)).unwrap();
        let curve: Vec<String> = out.train.to_tsv().lines().map(strip_seconds).collect();
        (ranking, curve, out.dir)
    };
    for encoder in ["id", "text_e2e"] {
        let (a, ca, dir) = run(&format!("a-{encoder}"), encoder);
        let (b, cb, _) = run(&format!("b-{encoder}"), encoder);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let again = evaluate_run(&dir, None).unwrap().to_tsv();
        assert_eq!(again, a);
        assert!(fs::read_to_string(dir.join(RESOLVED_CONFIG)).unwrap().contains(&format!("type = {encoder}")));
    }
}

fn merge_encoder(base: &str, encoder: &str) -> String {
    base.replace("[item_encoder]\n", &format!("[item_encoder]\ntype = {encoder}\n"))
}

/// Drops the wall-clock column of an epoch row.
fn strip_seconds(line: &str) -> String {
    if line.starts_with(|c: char| c.is_ascii_digit()) {
        let mut f: Vec<&str> = line.split('\t').collect();
        f.pop();
        f.join("\t")
    } else {
        line.to_string()
    }
}

fn report(family: &str, hr: f64, ndcg: f64) -> RankingReport {
    let mut meta = BTreeMap::new();
    meta.insert("family".to_string(), family.to_string());
    meta.insert("dataset_hash".to_string(), "same".to_string());
    RankingReport {
        n: 10,
        groups: vec![GroupMetrics {
            group: "overall".into(),
            users: 1,
            hr,
            ndcg,
        }],
        notes: Vec::new(),
        meta,
    }
}

#[test]
fn compare_reproduces_published_improvements() {
    let c = compare(&[report("idrec", 0.1771, 0.0401), report("morec", 0.1868, 0.0398)]).unwrap();
    let tsv = c.to_tsv();
    assert!(tsv.contains("overall\thr@10\t17.71\t18.68\t+5.48%"), "{tsv}");
    assert!(tsv.contains("overall\tndcg@10\t4.01\t3.98\t-0.75%"), "{tsv}");
}

#[test]
fn compare_refuses_mismatched_inputs() {
    let mut other = report("morec", 0.2, 0.1);
    other.meta.insert("dataset_hash".into(), "different".into());
    assert!(compare(&[report("idrec", 0.1, 0.1), other]).is_err());
    let mut n20 = report("morec", 0.2, 0.1);
    n20.n = 20;
    assert!(compare(&[report("idrec", 0.1, 0.1), n20]).is_err());
    assert!(compare(&[report("idrec", 0.1, 0.1), report("idrec", 0.2, 0.1)]).is_err());
}
