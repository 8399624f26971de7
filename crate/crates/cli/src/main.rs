use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recbench::experiment::{
    apply_overrides, compare, cost_report, evaluate_run, expand_grid, prepare, run_experiment, stats, write_prepared,
    DataSource, ExperimentConfig, RANKING_JSON, TRAIN_REPORT,
};
use recbench::eval::RankingReport;
use recbench::synthgen::{generate, write_generated};
use recbench::training::TrainReport;
use recbench::Error;

#[derive(Parser)]
#[command(name = "recbench", version, about = "ID-based vs modality-based recommenders on a full-ranking benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog (interactions, items, ground truth).
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Filter and split a dataset, then write the processed log and statistics.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate one config, or every cell of a grid config.
    Train {
        #[arg(long)]
        seed: u64,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        item_encoder: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_modality: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-evaluate a finished run from its directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Remove each user's history from the candidate pool.
        #[arg(long)]
        exclude_history: Option<bool>,
        /// Write the report here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative improvement of the best MoRec over the best IDRec.
    Compare {
        /// Run directories or ranking_report.json files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Parameter counts and seconds per epoch of finished runs.
    Cost {
        /// Run directories or train_report.tsv files.
        reports: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("`{s}` is not section.key=value"))
}

impl ConfigArgs {
    fn text(&self, extra: &[(String, String)]) -> recbench::Result<String> {
        let base = match &self.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut all = self.set.clone();
        all.extend_from_slice(extra);
        apply_overrides(&base, &all)
    }

    fn single(&self, extra: &[(String, String)]) -> recbench::Result<ExperimentConfig> {
        ExperimentConfig::from_ini(&self.text(extra)?)
    }
}

fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_ranking(path: &Path) -> recbench::Result<RankingReport> {
    RankingReport::from_json(&fs::read_to_string(resolve(path, RANKING_JSON))?)
}

fn run(cli: Cli) -> recbench::Result<ExitCode> {
    match cli.command {
        Command::Gen { seed, out, cfg } => {
            let c = cfg.single(&[("synthetic.seed".into(), seed.to_string())])?;
            let DataSource::Synthetic(g) = c.data else {
                return Err(Error::Config("gen needs data.source = synthetic".into()));
            };
            let generated = generate(&g)?;
            write_generated(&generated, &out)?;
            println!(
                "wrote {} users, {} items, {} interactions to {}",
                generated.log.num_users(),
                generated.log.num_items(),
                generated.log.num_interactions(),
                out.display()
            );
        }
        Command::Prepare { out, cfg } => {
            let c = cfg.single(&[])?;
            c.validate()?;
            let p = prepare(&c)?;
            write_prepared(&p, &out)?;
            print!("{}", stats(&p));
        }
        Command::Train {
            seed,
            out,
            backbone,
            item_encoder,
            epochs,
            lr,
            lr_modality,
            cfg,
        } => {
            let mut extra = vec![("train.seed".to_string(), seed.to_string())];
            let flags = [
                ("output.dir", out.map(|p| p.display().to_string())),
                ("backbone.type", backbone),
                ("item_encoder.type", item_encoder),
                ("train.epochs", epochs.map(|e| e.to_string())),
                ("train.lr", lr.map(|v| v.to_string())),
                ("train.lr_modality", lr_modality.map(|v| v.to_string())),
            ];
            extra.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
            let configs = expand_grid(&cfg.text(&extra)?)?;
            for c in &configs {
                c.validate()?;
            }
            let mut collapsed = false;
            for c in &configs {
                let outcome = run_experiment(c)?;
                let overall = outcome.ranking.group("overall");
                println!(
                    "{}\tbest_epoch={}\ttest_hr@{}={:.4}\ttest_ndcg@{}={:.4}{}",
                    outcome.dir.display(),
                    outcome.train.best_epoch,
                    c.eval.n,
                    overall.map_or(0.0, |g| g.hr),
                    c.eval.n,
                    overall.map_or(0.0, |g| g.ndcg),
                    if outcome.collapsed() { "\tCOLLAPSED" } else { "" }
                );
                if let Some(reason) = &outcome.train.collapse_reason {
                    eprintln!("collapse in {}: {reason}", outcome.dir.display());
                }
                collapsed |= outcome.collapsed();
            }
            if collapsed {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Eval {
            run,
            exclude_history,
            out,
        } => {
            let report = evaluate_run(&run, exclude_history)?;
            match out {
                Some(p) => fs::write(p, report.to_tsv())?,
                None => print!("{}", report.to_tsv()),
            }
        }
        Command::Compare { reports } => {
            let loaded = reports.iter().map(|p| load_ranking(p)).collect::<recbench::Result<Vec<_>>>()?;
            print!("{}", compare(&loaded)?.to_tsv());
        }
        Command::Cost { reports } => {
            let mut rows = Vec::new();
            for p in &reports {
                let file = resolve(p, TRAIN_REPORT);
                let label = if p.is_dir() { p } else { p.parent().unwrap_or(p) };
                let name = label.file_name().map_or_else(|| label.display().to_string(), |n| n.to_string_lossy().into_owned());
                rows.push((name, TrainReport::parse(&fs::read_to_string(&file)?)?));
            }
            print!("{}", cost_report(&rows).1);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    recbench::tune_allocator();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
