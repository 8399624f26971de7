//! Cross-run tables: relative improvement of MoRec over IDRec, and cost.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::RankingReport;
use crate::training::TrainReport;

/// `(best_morec - best_idrec) / best_idrec`; `None` when the IDRec value is 0.
pub fn improvement(best_morec: f64, best_idrec: f64) -> Option<f64> {
    (best_idrec != 0.0).then(|| (best_morec - best_idrec) / best_idrec)
}

/// Signed percent with two decimals; values that round to zero print as `0.00%`.
pub fn format_improvement(ratio: Option<f64>) -> String {
    let Some(r) = ratio else {
        return "n/a".into();
    };
    let pct = (r * 100.0 * 100.0).round() / 100.0;
    if pct == 0.0 {
        "0.00%".into()
    } else {
        format!("{pct:+.2}%")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub group: String,
    pub metric: String,
    pub best_idrec: f64,
    pub best_morec: f64,
    pub improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub n: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Metrics are printed in percent, as in published tables.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("group\tmetric\tbest_idrec\tbest_morec\timprov\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.2}\t{:.2}\t{}",
                r.group,
                r.metric,
                r.best_idrec * 100.0,
                r.best_morec * 100.0,
                format_improvement(r.improvement)
            );
        }
        s
    }
}

/// Best IDRec against best MoRec for every group present in all reports.
/// Reports are told apart by their `family` metadata and must agree on N and
/// on the dataset hash.
pub fn compare(reports: &[RankingReport]) -> Result<Comparison> {
    let Some(first) = reports.first() else {
        return Err(Error::EmptyInput("no reports to compare".into()));
    };
    let hash = |r: &RankingReport| r.meta.get("dataset_hash").cloned().unwrap_or_default();
    for (k, r) in reports.iter().enumerate() {
        if r.n != first.n {
            return Err(Error::config(format!("report {k} uses N={} but report 0 uses N={}", r.n, first.n)));
        }
        if hash(r) != hash(first) {
            return Err(Error::config(format!(
                "report {k} was computed on dataset {} but report 0 on {}; refusing to compare",
                hash(r),
                hash(first)
            )));
        }
    }
    fn fam(r: &RankingReport) -> &str {
        r.meta.get("family").map(String::as_str).unwrap_or("")
    }
    let (id, mo): (Vec<&RankingReport>, Vec<&RankingReport>) = reports.iter().partition(|r| fam(r) == "idrec");
    if id.is_empty() || mo.iter().any(|r| fam(r) != "morec") || mo.is_empty() {
        return Err(Error::config("compare needs at least one idrec and one morec report, and nothing else"));
    }
    let mut rows = Vec::new();
    for g in &first.groups {
        let all: Option<Vec<_>> = reports.iter().map(|r| r.group(&g.group)).collect();
        if all.is_none() {
            continue;
        }
        let best = |set: &[&RankingReport], f: fn(&crate::eval::GroupMetrics) -> f64| {
            set.iter()
                .filter_map(|r| r.group(&g.group))
                .map(f)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        for (metric, f) in [
            (format!("hr@{}", first.n), (|m: &crate::eval::GroupMetrics| m.hr) as fn(&_) -> f64),
            (format!("ndcg@{}", first.n), |m: &crate::eval::GroupMetrics| m.ndcg),
        ] {
            let (bi, bm) = (best(&id, f), best(&mo, f));
            rows.push(ComparisonRow {
                group: g.group.clone(),
                metric,
                best_idrec: bi,
                best_morec: bm,
                improvement: improvement(bm, bi),
            });
        }
    }
    Ok(Comparison { n: first.n, rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub label: String,
    pub params: usize,
    pub seconds_per_epoch: f64,
    pub epochs: usize,
}

/// `label<TAB>params<TAB>seconds_per_epoch<TAB>epochs`, one row per report.
pub fn cost_report(reports: &[(String, TrainReport)]) -> (Vec<CostRow>, String) {
    let rows: Vec<CostRow> = reports
        .iter()
        .map(|(label, r)| CostRow {
            label: label.clone(),
            params: r.tunable_params,
            seconds_per_epoch: r.mean_seconds(),
            epochs: r.records.len(),
        })
        .collect();
    let mut s = String::from("label\tparams\tseconds_per_epoch\tepochs\n");
    for r in &rows {
        let _ = writeln!(s, "{}\t{}\t{:.3}\t{}", r.label, r.params, r.seconds_per_epoch, r.epochs);
    }
    (rows, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_formatting() {
        assert_eq!(format_improvement(improvement(0.5, 0.5)), "0.00%");
        assert_eq!(format_improvement(improvement(0.1, 0.0)), "n/a");
        assert_eq!(format_improvement(Some(-0.000_01)), "0.00%");
        assert_eq!(format_improvement(Some(0.25)), "+25.00%");
    }
}
