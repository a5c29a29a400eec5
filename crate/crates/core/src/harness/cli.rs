use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::costmodel::{reference_i3d_tradeoff, tradeoff_csv, tradeoff_from_reports, CostRegistry};
use crate::error::{Error, Result};
use crate::synthdata::{generate_dataset, Dataset, SplitDataset};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::ExperimentConfig;
use super::eval::{evaluate, metrics_csv, BudgetMetrics};
use super::gradsuite::{full_suite, gradcheck_csv, max_rel_err, GRADCHECK_TOLERANCE};
use super::report::gating_report;
use super::train::train;

pub const TRAIN_FILE: &str = "train.tgds";
pub const TEST_FILE: &str = "test.tgds";
pub const CHECKPOINT_FILE: &str = "checkpoint.tgck";
pub const METRICS_JSON: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "timegate", version, about = "Conditional timestep gating experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and test splits described by the config.
    GenerateData(Common),
    /// Train the configured pipeline and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test split for every configured budget.
    Eval(WithCheckpoint),
    /// Per-class selection ratios and temporal gate profiles of a checkpoint.
    Report(WithCheckpoint),
    /// Computation/accuracy tradeoff CSV from finished evaluations.
    Tradeoff(TradeoffArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to load; `<out>/checkpoint.tgck` by default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TradeoffArgs {
    #[command(flatten)]
    common: Common,
    /// `metrics.json` files of finished evaluations; `<out>/metrics.json` by default.
    #[arg(long = "metrics")]
    metrics: Vec<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        fs::create_dir_all(&self.out)?;
        Ok(config)
    }
}

/// Loads the splits from `data.path` or generates them from `data.spec`.
pub fn load_or_generate(config: &ExperimentConfig) -> Result<SplitDataset> {
    match &config.data.path {
        Some(dir) => Ok(SplitDataset {
            train: Dataset::load(&dir.join(TRAIN_FILE))?,
            test: Dataset::load(&dir.join(TEST_FILE))?,
        }),
        None => generate_dataset(&config.data.spec, config.data.n_train, config.data.n_test, config.data_seed()),
    }
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on usage or config errors, 2 on
/// runtime failures.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenerateData(c) => {
            let config = c.load()?;
            let data = load_or_generate(&config)?;
            data.train.save(&c.out.join(TRAIN_FILE))?;
            data.test.save(&c.out.join(TEST_FILE))?;
            println!("{} train / {} test videos written to {}", data.train.videos.len(), data.test.videos.len(), c.out.display());
        }
        Command::Train(c) => {
            let config = c.load()?;
            let data = load_or_generate(&config)?;
            let outcome = train(&config, &data.train)?;
            save_checkpoint(&Checkpoint::from_outcome(&outcome), &c.out.join(CHECKPOINT_FILE))?;
            write(&c.out, "history.json", &serde_json::to_string_pretty(&outcome.history)?)?;
            println!("final loss {:.6} after {} epochs", outcome.final_loss(), outcome.history.len());
        }
        Command::Eval(a) => {
            let config = a.common.load()?;
            let mut model = checkpoint_for(&a)?.to_model()?;
            model.config.eval = config.eval.clone();
            let data = load_or_generate(&config)?;
            let rows = evaluate(&model, &data.test, &model.config.budgets())?;
            warn!("metrics from the single seed {}; compare modes over 5 seeds before reading a trend", config.seed);
            write(&a.common.out, "metrics.csv", &metrics_csv(&rows))?;
            write(&a.common.out, METRICS_JSON, &serde_json::to_string_pretty(&rows)?)?;
            for r in &rows {
                println!("{} {}: {} {:.4} at {:.2} timesteps, {:.6} GFLOPs", r.mode, r.budget, r.metric_name, r.metric, r.mean_selected, r.cost.total_gflops);
            }
        }
        Command::Report(a) => {
            let config = a.common.load()?;
            let model = checkpoint_for(&a)?.to_model()?;
            let data = load_or_generate(&config)?;
            let report = gating_report(&model, &data.test)?;
            write(&a.common.out, "class_ratios.csv", &report.ratios_csv())?;
            write(&a.common.out, "temporal_profile.csv", &report.profile_csv())?;
            write(&a.common.out, "gating_report.json", &serde_json::to_string_pretty(&report)?)?;
            println!("across-class ratio variance {:.6}", report.ratio_variance);
        }
        Command::Tradeoff(a) => {
            a.common.load()?;
            let files = if a.metrics.is_empty() { vec![a.common.out.join(METRICS_JSON)] } else { a.metrics.clone() };
            let mut items = Vec::new();
            for f in &files {
                let rows: Vec<BudgetMetrics> = serde_json::from_str(&fs::read_to_string(f)?)?;
                items.extend(rows.into_iter().map(|r| (r.mode, r.cost, r.metric)));
            }
            let rows = tradeoff_from_reports(&items)?;
            write(&a.common.out, "tradeoff.csv", &tradeoff_csv(&rows))?;
            let reference = reference_i3d_tradeoff(&CostRegistry::default())?;
            write(&a.common.out, "reference_tradeoff.csv", &tradeoff_csv(&reference))?;
            println!("{} tradeoff rows from {} file(s)", rows.len(), files.len());
        }
        Command::Gradcheck(c) => {
            let config = c.load()?;
            let start = Instant::now();
            let cases = full_suite(config.seed)?;
            write(&c.out, "gradcheck.csv", &gradcheck_csv(&cases))?;
            let worst = max_rel_err(&cases);
            let pass = worst < GRADCHECK_TOLERANCE;
            println!(
                "{} cases, max relative error {worst:e}, {:.1}s: {}",
                cases.len(),
                start.elapsed().as_secs_f64(),
                if pass { "pass" } else { "FAIL" }
            );
            return Ok(if pass { 0 } else { 2 });
        }
    }
    Ok(0)
}

fn checkpoint_for(a: &WithCheckpoint) -> Result<Checkpoint> {
    let path = a.checkpoint.clone().unwrap_or_else(|| a.common.out.join(CHECKPOINT_FILE));
    load_checkpoint(&path)
}
