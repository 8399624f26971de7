//! The experiment pipeline: data preparation, training, evaluation and the
//! artifacts each run leaves behind.

mod config;
mod report;

pub use config::{apply_overrides, expand_grid, DataSource, ExperimentConfig, Precision};
pub use report::{compare, cost_report, format_improvement, improvement, Comparison, CostRow};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbones::Recommender;
use crate::catalog::{
    filter_min_interactions, leave_one_out_split, load_interactions, load_items, truncate_user_sequences,
    warm_k_filter, write_histogram, write_interactions, DatasetSplit, InteractionLog, ItemContent, ItemRecords,
};
use crate::encoders::{mlm_pretrain, restore_checkpoint, save_checkpoint, ItemData};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalGroups, RankingReport, Target};
use crate::scalar::Scalar;
use crate::synthgen::generate;
use crate::training::{train, TrainReport};

pub const RESOLVED_CONFIG: &str = "resolved.ini";
pub const TRAIN_REPORT: &str = "train_report.tsv";
pub const RANKING_REPORT: &str = "ranking_report.tsv";
pub const RANKING_JSON: &str = "ranking_report.json";
pub const CHECKPOINT: &str = "model.ckpt";

/// Everything derived from the data source before a model exists.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub log: InteractionLog,
    pub split: DatasetSplit,
    pub records: ItemRecords,
    pub groups: EvalGroups,
    /// Item counts of the log as loaded, before any filtering, aligned to `log`.
    pub original_counts: Vec<usize>,
    pub dataset_hash: String,
}

fn load_source(cfg: &ExperimentConfig) -> Result<(InteractionLog, Vec<ItemContent>)> {
    match &cfg.data {
        DataSource::Synthetic(g) => {
            let generated = generate(g)?;
            Ok((generated.log, generated.items))
        }
        DataSource::Files { interactions, items, columns } => {
            let log = load_interactions(interactions, *columns)?;
            let content = match items {
                Some(p) => load_items(p)?,
                None => Vec::new(),
            };
            Ok((log, content))
        }
    }
}

/// Load or generate, drop short users, apply the warm filter, truncate, split.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (raw, content) = load_source(cfg)?;
    let raw_counts = raw.item_counts_by_key();
    let mut log = filter_min_interactions(&raw, cfg.min_user_interactions)?;
    if cfg.warm_filter > 0 {
        log = warm_k_filter(&log, cfg.warm_filter);
    }
    log = truncate_user_sequences(&log, cfg.truncate)?;
    if log.num_users() == 0 {
        return Err(Error::EmptyInput("no user survives filtering".into()));
    }
    let split = leave_one_out_split(&log)?;
    let records = ItemRecords::align(&log, &content, cfg.max_title_tokens)?;
    let enc = &cfg.model.encoder;
    if enc.needs_text() && !records.has_text() {
        return Err(Error::config(format!("item encoder {enc} needs titles, none were found")));
    }
    if enc.needs_features() && records.features.is_none() {
        return Err(Error::config(format!("item encoder {enc} needs a feature vector for every item")));
    }
    let original_counts: Vec<usize> = log.item_keys().iter().map(|k| raw_counts[k]).collect();
    let groups = EvalGroups::build(&split, &original_counts, &cfg.warm_ks);
    let dataset_hash = log.content_hash()[..16].to_string();
    Ok(Prepared {
        log,
        split,
        records,
        groups,
        original_counts,
        dataset_hash,
    })
}

/// Writes the processed log, the training popularity histogram and summary
/// statistics into `dir`.
pub fn write_prepared(p: &Prepared, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_interactions(&p.log, dir.join("interactions.tsv"))?;
    let hist = crate::catalog::popularity_histogram(&p.split.train, p.split.num_items);
    write_histogram(&hist, fs::File::create(dir.join("histogram.tsv"))?)?;
    fs::write(dir.join("stats.tsv"), stats(p))?;
    Ok(())
}

pub fn stats(p: &Prepared) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "users\t{}", p.log.num_users());
    let _ = writeln!(s, "items\t{}", p.log.num_items());
    let _ = writeln!(s, "interactions\t{}", p.log.num_interactions());
    let _ = writeln!(s, "dataset_hash\t{}", p.dataset_hash);
    for (name, users) in &p.groups.groups {
        let _ = writeln!(s, "group:{name}\t{}", users.len());
    }
    s
}

/// Outcome of a run; the same values are written into the run directory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub train: TrainReport,
    pub ranking: RankingReport,
    pub mlm_losses: Vec<f64>,
}

impl RunOutcome {
    pub fn collapsed(&self) -> bool {
        self.train.collapsed
    }
}

fn family(cfg: &ExperimentConfig) -> &'static str {
    if cfg.model.encoder.is_id() {
        "idrec"
    } else {
        "morec"
    }
}

fn report_meta(cfg: &ExperimentConfig, p: &Prepared, r: &mut RankingReport) {
    let label = if cfg.label.is_empty() { cfg.cell_name() } else { cfg.label.clone() };
    let meta = [
        ("backbone", cfg.model.backbone.name().to_string()),
        ("config_hash", cfg.config_hash()),
        ("dataset_hash", p.dataset_hash.clone()),
        ("encoder", cfg.model.encoder.to_string()),
        ("exclude_history", cfg.eval.exclude_history.to_string()),
        ("family", family(cfg).to_string()),
        ("label", label),
        ("seed", cfg.hp.seed.to_string()),
    ];
    r.meta.extend(meta.into_iter().map(|(k, v)| (k.to_string(), v)));
}

fn build_model<T: Scalar>(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Recommender<T>, ItemData<T>)> {
    let data = ItemData::<T>::from_records(&p.records)?;
    let model = Recommender::new(cfg.model.clone(), p.split.num_users(), &data, cfg.hp.seed)?;
    Ok((model, data))
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, p: &Prepared) -> Result<RunOutcome> {
    let (mut model, data) = build_model::<T>(cfg, p)?;
    let mlm_losses = match (cfg.mlm.epochs, model.encoder.text()) {
        (0, _) | (_, None) => Vec::new(),
        (_, Some(text)) => {
            let text = text.clone();
            let mlm = crate::encoders::MlmConfig {
                seed: cfg.hp.seed,
                ..cfg.mlm
            };
            mlm_pretrain(&text, &mut model.store, &data.tokens, data.vocab_size, &mlm)?
        }
    };
    let report = train(&mut model, &p.split, &data, &cfg.hp)?;
    let mut ranking = evaluate(&model, &p.split, &data, &p.groups, Target::Test, cfg.eval)?;
    report_meta(cfg, p, &mut ranking);

    let dir = cfg.output.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_ini())?;
    fs::write(dir.join(TRAIN_REPORT), report.to_tsv())?;
    fs::write(dir.join(RANKING_REPORT), ranking.to_tsv())?;
    fs::write(dir.join(RANKING_JSON), ranking.to_json()?)?;
    save_checkpoint(&model.store, dir.join(CHECKPOINT))?;
    Ok(RunOutcome {
        dir,
        train: report,
        ranking,
        mlm_losses,
    })
}

/// Runs one experiment end to end and writes its artifacts into `cfg.output`.
/// A collapsed run still writes its reports; the caller decides how to exit.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let p = prepare(cfg)?;
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, &p),
        Precision::F32 => run_typed::<f32>(cfg, &p),
    }
}

fn eval_typed<T: Scalar>(cfg: &ExperimentConfig, p: &Prepared, ckpt: &Path) -> Result<RankingReport> {
    let (mut model, data) = build_model::<T>(cfg, p)?;
    restore_checkpoint(&mut model.store, ckpt)?;
    let mut r = evaluate(&model, &p.split, &data, &p.groups, Target::Test, cfg.eval)?;
    report_meta(cfg, p, &mut r);
    Ok(r)
}

/// Re-evaluates a finished run from its resolved config and checkpoint.
/// `exclude_history` overrides the run's setting when given.
pub fn evaluate_run(dir: impl AsRef<Path>, exclude_history: Option<bool>) -> Result<RankingReport> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(RESOLVED_CONFIG))?;
    let mut cfg = ExperimentConfig::from_ini(&text)?;
    if let Some(x) = exclude_history {
        cfg.eval.exclude_history = x;
    }
    cfg.validate()?;
    let p = prepare(&cfg)?;
    let ckpt = dir.join(CHECKPOINT);
    match cfg.precision {
        Precision::F64 => eval_typed::<f64>(&cfg, &p, &ckpt),
        Precision::F32 => eval_typed::<f32>(&cfg, &p, &ckpt),
    }
}
