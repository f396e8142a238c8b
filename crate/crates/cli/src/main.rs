//! `bttf` command line: prepare data, train estimators, benchmark the
//! four-way comparison, stream adjusted present-state estimates, and export
//! importance rankings.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bttf_core::dataio::{
    aggregate_daily, chrono_split, clean, ingest_csv, make_windows, SplitSpec, TimeSeriesTable,
};
use bttf_core::eval::{
    curves_csv, importance_csv, one_day_dataset, render_table, run_benchmark,
    time_series_dataset, SuiteConfig,
};
use bttf_core::gbt::{feature_importance, fit_gbt, load_gbt, save_gbt};
use bttf_core::pipeline::{
    feedback_loop, load_bttf, save_bttf, train_bttf, BTTFConfig, BUNDLE_MANIFEST,
};
use bttf_core::visionary::{save_visionary, train_visionary};
use bttf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bttf",
    version,
    about = "Hybrid nowcasting: attention forecaster + boosted-tree present-state adapter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a weather-history CSV, clean it, and cache a binary table.
    Ingest(IngestArgs),
    /// Train one estimator on chronological splits of a cached table.
    Train(TrainArgs),
    /// Run the comparison suite and render the metrics table.
    Benchmark(BenchmarkArgs),
    /// Stream adjusted present-state estimates over a table.
    Predict(PredictArgs),
    /// Export a tree model's split-count importance ranking as CSV.
    Importance(ImportanceArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Source CSV in the weather-history layout.
    #[arg(long)]
    input: PathBuf,
    /// Output table file.
    #[arg(long)]
    out: PathBuf,
    /// Collapse hourly rows to daily means after cleaning.
    #[arg(long)]
    daily: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    /// Attention forecaster alone.
    Visionary,
    /// Boosted-tree baseline alone.
    Gbt,
    /// Two-stage hybrid; writes a bundle directory.
    Bttf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeaturesArg {
    /// Non-target features of the last observed row only.
    OneDay,
    /// Present features plus the last window row.
    TimeSeries,
}

#[derive(Args)]
struct TrainArgs {
    /// Which estimator to train.
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Cached table from `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Output model path: a file for visionary/gbt, a directory for bttf.
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature set for the gbt baseline (ignored otherwise).
    #[arg(long, value_enum, default_value_t = FeaturesArg::TimeSeries)]
    features: FeaturesArg,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Cached table from `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for reports, table, and diagnostics.
    #[arg(long)]
    out: PathBuf,
    /// Suite config JSON; missing fields take defaults.
    #[arg(long)]
    suite: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Bundle directory (or its manifest file) from `train --model bttf`.
    #[arg(long)]
    model: PathBuf,
    /// Cached table from `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// First origin row to estimate; defaults to the earliest that has a
    /// full history window.
    #[arg(long)]
    from: Option<usize>,
    /// Number of origins to step through; defaults to the rest of the table.
    #[arg(long)]
    steps: Option<usize>,
    /// Steps between decision-stage refits on streamed pairs; 0 disables.
    #[arg(long, default_value_t = 0)]
    refit_interval: usize,
}

#[derive(Args)]
struct ImportanceArgs {
    /// Tree model file or bttf bundle (uses its decision stage).
    #[arg(long)]
    model: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Everything a training run depends on besides the data itself, as one
/// JSON document so outputs stay self-describing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    bttf: BTTFConfig,
    split: SplitSpec,
    /// Collapse the table to daily means before windowing.
    daily: bool,
    /// Overrides both stage seeds when set.
    seed: Option<u64>,
    /// Target column name; the first column when unset.
    target_column: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Train(args) => cmd_train(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Importance(args) => cmd_importance(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Schema(_) | Error::Io(_) | Error::Format(_) => 3,
        Error::Shape(_) | Error::Numeric(_) | Error::Contract(_) => 4,
    }
}

/// Paths given on the command line must exist; anything else is a usage
/// error, not a data error.
fn require_path(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    require_path(path, "config file")?;
    let bytes = fs::read(path)?;
    let mut cfg: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cfg.seed {
        cfg.bttf.visionary.seed = seed;
        cfg.bttf.gbt.seed = seed;
    }
    Ok(cfg)
}

fn load_table(path: &Path, daily: bool) -> Result<TimeSeriesTable> {
    require_path(path, "table file")?;
    let table = TimeSeriesTable::load(path)?;
    if daily {
        aggregate_daily(&table)
    } else {
        Ok(table)
    }
}

fn non_target_names(table: &TimeSeriesTable, target_index: usize) -> Vec<String> {
    table
        .columns()
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target_index)
        .map(|(_, n)| n.clone())
        .collect()
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    require_path(&args.input, "input file")?;
    let raw = ingest_csv(&args.input)?;
    println!("rows before cleaning: {}", raw.rows.len());
    let mut table = clean(&raw)?;
    println!("rows after cleaning: {}", table.n_rows());
    if args.daily {
        table = aggregate_daily(&table)?;
        println!("daily rows: {}", table.n_rows());
    }
    table.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    cfg.bttf.validate()?;
    let table = load_table(&args.data, cfg.daily)?;
    if let Some(name) = &cfg.target_column {
        cfg.bttf.visionary.target_index = table.column_index(name)?;
    }
    let target_index = cfg.bttf.visionary.target_index;
    let samples =
        make_windows(&table, cfg.bttf.visionary.k, cfg.bttf.visionary.h, target_index)?;
    let (train, val, _) = chrono_split(samples, &cfg.split)?;
    println!("training on {} samples, validating on {}", train.len(), val.len());

    match args.model {
        ModelArg::Visionary => {
            let (model, curve) = train_visionary(&train, &val, &cfg.bttf.visionary)?;
            save_visionary(&args.out, &model)?;
            let curve_path = args.out.with_extension("curves.csv");
            fs::write(&curve_path, curves_csv(&curve))?;
            if let Some(last) = curve.epochs.last() {
                println!("final train loss: {}", last.train_loss);
            }
            println!("wrote {}", args.out.display());
            println!("wrote {}", curve_path.display());
        }
        ModelArg::Gbt => {
            let model = match args.features {
                FeaturesArg::OneDay => {
                    let (x, y) = one_day_dataset(&train)?;
                    let names = non_target_names(&table, target_index);
                    fit_gbt(&x, &y, &cfg.bttf.gbt)?.with_feature_names(names)?
                }
                FeaturesArg::TimeSeries => {
                    let (x, y) = time_series_dataset(&train)?;
                    let mut names = non_target_names(&table, target_index);
                    names.extend(table.columns().iter().map(|n| format!("{n} (last)")));
                    fit_gbt(&x, &y, &cfg.bttf.gbt)?.with_feature_names(names)?
                }
            };
            save_gbt(&args.out, &model)?;
            let curve_path = args.out.with_extension("curves.csv");
            let mut text = String::from("round,objective\n");
            for (round, v) in model.objective_trace.iter().enumerate() {
                text.push_str(&format!("{round},{v}\n"));
            }
            fs::write(&curve_path, text)?;
            if let Some(last) = model.objective_trace.last() {
                println!("final objective: {last}");
            }
            println!("wrote {}", args.out.display());
            println!("wrote {}", curve_path.display());
        }
        ModelArg::Bttf => {
            let (mut model, curve) = train_bttf(&train, &val, &cfg.bttf)?;
            model.set_present_names(&non_target_names(&table, target_index))?;
            save_bttf(&args.out, &model)?;
            let curve_path = args.out.join("curves.csv");
            fs::write(&curve_path, curves_csv(&curve))?;
            if let Some(last) = curve.epochs.last() {
                println!("final train loss: {}", last.train_loss);
            }
            println!("wrote {}", args.out.display());
            println!("wrote {}", curve_path.display());
        }
    }
    Ok(())
}

/// BTTF_THREADS caps worker parallelism; without it the cap is the logical
/// core count. A suite request of 0 means "up to the cap".
fn resolve_threads(requested: usize) -> Result<usize> {
    let logical = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = match std::env::var("BTTF_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| {
                Error::Config(format!("BTTF_THREADS must be a positive integer, got {s:?}"))
            })?,
        Err(std::env::VarError::NotPresent) => logical,
        Err(e) => return Err(Error::Config(format!("BTTF_THREADS: {e}"))),
    };
    Ok(if requested == 0 { cap } else { requested.min(cap) })
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<()> {
    let mut suite: SuiteConfig = match &args.suite {
        Some(path) => {
            require_path(path, "suite file")?;
            let bytes = fs::read(path)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SuiteConfig::default(),
    };
    suite.threads = resolve_threads(suite.threads)?;
    let table = load_table(&args.data, false)?;
    let reports = run_benchmark(&table, &suite, &args.out)?;
    print!("{}", render_table(&reports));
    println!("wrote {}", args.out.join("reports.json").display());
    println!("wrote {}", args.out.join("table.md").display());
    Ok(())
}

fn slice_table(table: &TimeSeriesTable, lo: usize, hi: usize) -> Result<TimeSeriesTable> {
    let mut values = Vec::with_capacity((hi - lo) * table.n_cols());
    for r in lo..hi {
        values.extend_from_slice(table.row(r));
    }
    TimeSeriesTable::new(
        table.timestamps()[lo..hi].to_vec(),
        table.columns().to_vec(),
        values,
    )
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    require_path(&args.model, "model path")?;
    let model = load_bttf(&args.model)?;
    let table = load_table(&args.data, false)?;
    let k = model.visionary.config.k;
    let t_len = table.n_rows();
    if t_len <= k {
        return Err(Error::Data(format!(
            "table has {t_len} rows, need more than the window length {k}"
        )));
    }
    let from = args.from.unwrap_or(k);
    if from < k || from >= t_len {
        return Err(Error::Config(format!(
            "from must lie in [{k}, {}], got {from}",
            t_len - 1
        )));
    }
    let steps = args.steps.unwrap_or(t_len - from);
    if steps == 0 || from + steps > t_len {
        return Err(Error::Config(format!(
            "steps must lie in [1, {}] for origin {from}, got {steps}",
            t_len - from
        )));
    }

    let stream = slice_table(&table, from - k, from + steps)?;
    let cfg = BTTFConfig {
        visionary: model.visionary.config.clone(),
        gbt: model.decision.config.clone(),
        adaptation_mode: model.mode,
        refit_interval: args.refit_interval,
    };
    let states = feedback_loop(&model, &stream, &cfg)?;

    let target_index = model.visionary.config.target_index;
    let mut text = String::from("t,x_t,delta,x_adjusted,truth\n");
    for (i, s) in states.iter().enumerate() {
        let t = from + i;
        let truth = if t < t_len {
            table.value(t, target_index).to_string()
        } else {
            String::new()
        };
        text.push_str(&format!("{t},{},{},{},{truth}\n", s.x_t, s.delta, s.x_adjusted));
    }
    fs::write(&args.out, text)?;
    println!("wrote {} ({} rows)", args.out.display(), states.len());
    Ok(())
}

fn cmd_importance(args: ImportanceArgs) -> Result<()> {
    require_path(&args.model, "model path")?;
    let is_bundle = args.model.is_dir()
        || args.model.file_name().is_some_and(|n| n == BUNDLE_MANIFEST);
    let model = if is_bundle {
        load_bttf(&args.model)?.decision
    } else {
        load_gbt(&args.model)?
    };
    let importance = feature_importance(&model);
    fs::write(&args.out, importance_csv(&importance))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
