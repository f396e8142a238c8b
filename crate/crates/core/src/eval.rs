//! Regression metrics, the four-way benchmark harness, and plain-CSV export
//! of the diagnostic data behind the learning-curve, scatter, histogram, and
//! importance plots.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{chrono_split, make_windows, SplitSpec, TimeSeriesTable, WindowSample};
use crate::error::{Error, Result};
use crate::gbt::{feature_importance, fit_gbt, predict_gbt, FeatureImportance, GBTConfig};
use crate::numcore::{derive_seed, Tensor};
use crate::pipeline::{predict_bttf, train_bttf, AdaptationMode, BTTFConfig};
use crate::visionary::{predict_horizon, train_visionary, LearningCurve, VisionaryConfig};

/// Root mean squared error in the inputs' units.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("rmse of zero samples".into()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Coefficient of determination: 1 - SSres/SStot.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::Data(format!("r2 needs at least 2 samples, got {}", truth.len())));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numeric("r2 undefined for a constant truth vector".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// The four benchmarked estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    VisionaryOnly,
    GbtOneDay,
    GbtTimeSeries,
    Bttf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::VisionaryOnly, ModelKind::GbtOneDay, ModelKind::GbtTimeSeries, ModelKind::Bttf];

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::VisionaryOnly => "visionary-only",
            ModelKind::GbtOneDay => "gbt-one-day",
            ModelKind::GbtTimeSeries => "gbt-time-series",
            ModelKind::Bttf => "bttf",
        }
    }

    /// Whether the kind trains for a configurable number of epochs; tree
    /// baselines are a single ensemble fit.
    pub fn epoch_bearing(&self) -> bool {
        matches!(self, ModelKind::VisionaryOnly | ModelKind::Bttf)
    }

    fn ordinal(&self) -> u64 {
        match self {
            ModelKind::VisionaryOnly => 1,
            ModelKind::GbtOneDay => 2,
            ModelKind::GbtTimeSeries => 3,
            ModelKind::Bttf => 4,
        }
    }
}

/// Published reference metrics for one comparison row. `epochs` is None for
/// the single-fit tree baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaperRef {
    pub kind: ModelKind,
    pub epochs: Option<usize>,
    pub rmse: f64,
    pub r2: f64,
}

/// Reference results reported by the source publication, embedded for
/// side-by-side display only; never asserted against our runs.
pub const PAPER_REFERENCES: &[PaperRef] = &[
    PaperRef { kind: ModelKind::VisionaryOnly, epochs: Some(5), rmse: 3.7, r2: 0.8488 },
    PaperRef { kind: ModelKind::VisionaryOnly, epochs: Some(100), rmse: 2.5820, r2: 0.9264 },
    PaperRef { kind: ModelKind::VisionaryOnly, epochs: Some(200), rmse: 2.4635, r2: 0.9330 },
    PaperRef { kind: ModelKind::GbtOneDay, epochs: None, rmse: 4.4138, r2: 0.7886 },
    PaperRef { kind: ModelKind::GbtTimeSeries, epochs: None, rmse: 3.9678, r2: 0.8288 },
    PaperRef { kind: ModelKind::Bttf, epochs: Some(5), rmse: 4.0695, r2: 0.8192 },
    PaperRef { kind: ModelKind::Bttf, epochs: Some(100), rmse: 2.3290, r2: 0.9407 },
    PaperRef { kind: ModelKind::Bttf, epochs: Some(200), rmse: 2.2479, r2: 0.9448 },
];

pub fn paper_ref(kind: ModelKind, epochs: usize) -> Option<&'static PaperRef> {
    PAPER_REFERENCES
        .iter()
        .find(|r| r.kind == kind && (r.epochs.is_none() || r.epochs == Some(epochs)))
}

fn default_epochs() -> Vec<usize> {
    vec![5, 100, 200]
}

fn default_kinds() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub kinds: Vec<ModelKind>,
    /// Epoch settings for the epoch-bearing kinds.
    pub epochs: Vec<usize>,
    pub seed: u64,
    pub split: SplitSpec,
    /// Base forecaster settings; epochs and seed are overridden per cell.
    pub visionary: VisionaryConfig,
    pub gbt: GBTConfig,
    pub adaptation_mode: AdaptationMode,
    /// Worker threads for independent cells; 0 = one per logical core.
    pub threads: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            kinds: default_kinds(),
            epochs: default_epochs(),
            seed: 0,
            split: SplitSpec::default(),
            visionary: VisionaryConfig::default(),
            gbt: GBTConfig::default(),
            adaptation_mode: AdaptationMode::Residual,
            threads: 1,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.kinds.is_empty() {
            bad.push("kinds (must list at least one model)");
        }
        if self.epochs.is_empty() || self.epochs.iter().any(|e| *e == 0) {
            bad.push("epochs (must be nonempty, all >= 1)");
        }
        if !bad.is_empty() {
            return Err(Error::Config(format!("invalid benchmark suite: {}", bad.join(", "))));
        }
        self.split.validate()?;
        self.visionary.validate()?;
        self.gbt.validate()
    }
}

/// One benchmark cell's result. The config snapshot holds everything needed
/// to re-run the cell bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub kind: ModelKind,
    pub epochs: usize,
    pub rmse: f64,
    pub r2: f64,
    pub wall_secs: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Raw data behind the diagnostic plots for one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticBundle {
    pub curve: LearningCurve,
    /// (truth, prediction) per evaluation sample, original units.
    pub scatter: Vec<(f64, f64)>,
    /// Per-sample squared errors on the train split.
    pub train_losses: Vec<f64>,
    /// Per-sample squared errors on the validation split.
    pub val_losses: Vec<f64>,
    pub importance: Option<FeatureImportance>,
}

const HIST_BINS: usize = 20;

/// Learning curve as CSV text, one row per epoch.
pub fn curves_csv(curve: &LearningCurve) -> String {
    let mut text = String::from("epoch,train_loss,val_loss,epoch_seconds\n");
    for e in &curve.epochs {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.wall_secs));
    }
    text
}

/// Importance ranking as CSV text, descending by split count, ties broken
/// by feature index.
pub fn importance_csv(imp: &FeatureImportance) -> String {
    let mut text = String::from("feature,f_score\n");
    for idx in imp.ranking() {
        text.push_str(&format!("{},{}\n", imp.names[idx], imp.counts[idx]));
    }
    text
}

/// Write the bundle as curves.csv, scatter.csv, loss_hist.csv, and
/// importance.csv (each only when the bundle carries that data).
pub fn export_diagnostics(bundle: &DiagnosticBundle, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    if !bundle.curve.epochs.is_empty() {
        fs::write(out_dir.join("curves.csv"), curves_csv(&bundle.curve))?;
    }
    if !bundle.scatter.is_empty() {
        let mut text = String::from("truth,prediction\n");
        for (t, p) in &bundle.scatter {
            text.push_str(&format!("{t},{p}\n"));
        }
        fs::write(out_dir.join("scatter.csv"), text)?;
    }
    if !bundle.train_losses.is_empty() {
        fs::write(out_dir.join("loss_hist.csv"), render_histogram(bundle))?;
    }
    if let Some(imp) = &bundle.importance {
        fs::write(out_dir.join("importance.csv"), importance_csv(imp))?;
    }
    Ok(())
}

fn render_histogram(bundle: &DiagnosticBundle) -> String {
    let all: Vec<f64> =
        bundle.train_losses.iter().chain(&bundle.val_losses).copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bin_of = |v: f64| -> usize {
        let i = ((v - lo) / span * HIST_BINS as f64) as usize;
        i.min(HIST_BINS - 1)
    };
    let mut train = [0u64; HIST_BINS];
    let mut val = [0u64; HIST_BINS];
    for v in &bundle.train_losses {
        train[bin_of(*v)] += 1;
    }
    for v in &bundle.val_losses {
        val[bin_of(*v)] += 1;
    }
    let mut text = String::from("bin_lo,bin_hi,train_count,val_count\n");
    for b in 0..HIST_BINS {
        let blo = lo + span * b as f64 / HIST_BINS as f64;
        let bhi = lo + span * (b + 1) as f64 / HIST_BINS as f64;
        text.push_str(&format!("{blo},{bhi},{},{}\n", train[b], val[b]));
    }
    text
}

/// Single-day baseline features: just the present vector (the non-target
/// features at the prediction time), no temporal depth. The feature names
/// are the non-target column names in table order.
pub fn one_day_dataset(samples: &[WindowSample]) -> Result<(Tensor, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("single-day baseline needs samples".into()))?;
    let width = first.present.len();
    let mut xs = Vec::with_capacity(samples.len() * width);
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        if s.present.len() != width {
            return Err(Error::Shape(format!(
                "sample at origin {} has {} present features, first sample has {width}",
                s.t_index,
                s.present.len()
            )));
        }
        xs.extend_from_slice(&s.present);
        ys.push(*s.target.first().ok_or_else(|| {
            Error::Shape(format!("sample at origin {} has no target", s.t_index))
        })?);
    }
    Ok((Tensor::new(vec![samples.len(), width], xs)?, ys))
}

/// Lag-aware baseline features: `[present, last window row]` per sample,
/// the exact layout a pass-through forecaster feeds the decision stage.
pub fn time_series_dataset(samples: &[WindowSample]) -> Result<(Tensor, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("time-series baseline needs samples".into()))?;
    let (k, d) = first.window.dims2()?;
    let width = first.present.len() + d;
    let mut xs = Vec::with_capacity(samples.len() * width);
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        xs.extend_from_slice(&s.present);
        xs.extend_from_slice(s.window.row2(k - 1)?);
        ys.push(*s.target.first().ok_or_else(|| {
            Error::Shape(format!("sample at origin {} has no target", s.t_index))
        })?);
    }
    Ok((Tensor::new(vec![samples.len(), width], xs)?, ys))
}

struct Cell {
    kind: ModelKind,
    epochs: usize,
    seed: u64,
    run_id: String,
}

fn plan_cells(suite: &SuiteConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for kind in &suite.kinds {
        let epoch_settings: Vec<usize> =
            if kind.epoch_bearing() { suite.epochs.clone() } else { vec![1] };
        for epochs in epoch_settings {
            let seed = derive_seed(suite.seed, kind.ordinal() * 1_000_000 + epochs as u64);
            let run_id = format!("{}-e{}-s{}", kind.label(), epochs, suite.seed);
            cells.push(Cell { kind: *kind, epochs, seed, run_id });
        }
    }
    cells
}

/// Split shared by every cell: windows in chronological order, cut at the
/// same boundaries for all four kinds.
struct SharedData {
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    test: Vec<WindowSample>,
}

fn run_cell(
    table: &TimeSeriesTable,
    data: &SharedData,
    suite: &SuiteConfig,
    cell: &Cell,
    out_dir: &Path,
) -> Result<MetricReport> {
    let target_index = suite.visionary.target_index;
    let truth: Vec<f64> = data.test.iter().map(|s| s.target[0]).collect();
    let started = Instant::now();
    let mut diag = DiagnosticBundle::default();

    let pred: Vec<f64> = match cell.kind {
        ModelKind::VisionaryOnly => {
            let cfg = VisionaryConfig {
                epochs: cell.epochs,
                seed: cell.seed,
                ..suite.visionary.clone()
            };
            let (model, curve) = train_visionary(&data.train, &data.val, &cfg)?;
            diag.curve = curve;
            let predict = |s: &WindowSample| -> Result<f64> {
                Ok(predict_horizon(&model, &s.window)?[0])
            };
            for s in data.train.iter() {
                let p = predict(s)?;
                diag.train_losses.push((p - s.target[0]).powi(2));
            }
            for s in data.val.iter() {
                let p = predict(s)?;
                diag.val_losses.push((p - s.target[0]).powi(2));
            }
            data.test.iter().map(predict).collect::<Result<_>>()?
        }
        ModelKind::GbtOneDay => {
            let cfg = GBTConfig { seed: cell.seed, ..suite.gbt.clone() };
            let names: Vec<String> = table
                .columns()
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != target_index)
                .map(|(_, n)| n.clone())
                .collect();
            let (x, y) = one_day_dataset(&data.train)?;
            let model = fit_gbt(&x, &y, &cfg)?.with_feature_names(names)?;
            diag.importance = Some(feature_importance(&model));
            for (split, losses) in
                [(&data.train, &mut diag.train_losses), (&data.val, &mut diag.val_losses)]
            {
                if split.is_empty() {
                    continue;
                }
                let (xs, ys) = one_day_dataset(split)?;
                for (i, yv) in ys.iter().enumerate() {
                    let p = predict_gbt(&model, xs.row2(i)?)?;
                    losses.push((p - yv).powi(2));
                }
            }
            let (xt, _) = one_day_dataset(&data.test)?;
            (0..data.test.len())
                .map(|i| predict_gbt(&model, xt.row2(i)?))
                .collect::<Result<_>>()?
        }
        ModelKind::GbtTimeSeries => {
            let cfg = GBTConfig { seed: cell.seed, ..suite.gbt.clone() };
            let (x, y) = time_series_dataset(&data.train)?;
            let model = fit_gbt(&x, &y, &cfg)?;
            diag.importance = Some(feature_importance(&model));
            for (split, losses) in
                [(&data.train, &mut diag.train_losses), (&data.val, &mut diag.val_losses)]
            {
                if split.is_empty() {
                    continue;
                }
                let (xs, ys) = time_series_dataset(split)?;
                for (i, yv) in ys.iter().enumerate() {
                    let p = predict_gbt(&model, xs.row2(i)?)?;
                    losses.push((p - yv).powi(2));
                }
            }
            let (xt, _) = time_series_dataset(&data.test)?;
            (0..data.test.len())
                .map(|i| predict_gbt(&model, xt.row2(i)?))
                .collect::<Result<_>>()?
        }
        ModelKind::Bttf => {
            let cfg = BTTFConfig {
                visionary: VisionaryConfig {
                    epochs: cell.epochs,
                    seed: cell.seed,
                    ..suite.visionary.clone()
                },
                gbt: GBTConfig { seed: cell.seed, ..suite.gbt.clone() },
                adaptation_mode: suite.adaptation_mode,
                refit_interval: 0,
            };
            let (mut model, curve) = train_bttf(&data.train, &data.val, &cfg)?;
            let present_names: Vec<String> = table
                .columns()
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != target_index)
                .map(|(_, n)| n.clone())
                .collect();
            model.set_present_names(&present_names)?;
            diag.curve = curve;
            diag.importance = Some(feature_importance(&model.decision));
            let predict = |s: &WindowSample| -> Result<f64> {
                Ok(predict_bttf(&model, &s.window, &s.present)?.x_adjusted)
            };
            for s in data.train.iter() {
                let p = predict(s)?;
                diag.train_losses.push((p - s.target[0]).powi(2));
            }
            for s in data.val.iter() {
                let p = predict(s)?;
                diag.val_losses.push((p - s.target[0]).powi(2));
            }
            data.test.iter().map(predict).collect::<Result<_>>()?
        }
    };
    let wall_secs = started.elapsed().as_secs_f64();

    diag.scatter = truth.iter().copied().zip(pred.iter().copied()).collect();
    export_diagnostics(&diag, &out_dir.join("diagnostics").join(&cell.run_id))?;

    let config = json!({
        "kind": cell.kind,
        "epochs": cell.epochs,
        "seed": cell.seed,
        "suite_seed": suite.seed,
        "split": suite.split,
        "visionary": suite.visionary,
        "gbt": suite.gbt,
        "adaptation_mode": suite.adaptation_mode,
    });
    Ok(MetricReport {
        run_id: cell.run_id.clone(),
        kind: cell.kind,
        epochs: cell.epochs,
        rmse: rmse(&pred, &truth)?,
        r2: r2(&pred, &truth)?,
        wall_secs,
        seed: cell.seed,
        config,
    })
}

fn cell_cache_path(out_dir: &Path, run_id: &str) -> std::path::PathBuf {
    out_dir.join("cells").join(format!("{run_id}.json"))
}

fn load_cached_report(path: &Path) -> Option<MetricReport> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Run every suite cell on identical chronological splits, writing each
/// cell's report to `out_dir/cells/` as it completes (so an interrupted run
/// resumes from finished cells), then reports.json and table.md. Returns the
/// reports in cell order.
pub fn run_benchmark(
    table: &TimeSeriesTable,
    suite: &SuiteConfig,
    out_dir: &Path,
) -> Result<Vec<MetricReport>> {
    suite.validate()?;
    fs::create_dir_all(out_dir.join("cells"))?;

    let samples = make_windows(table, suite.visionary.k, suite.visionary.h, suite.visionary.target_index)?;
    let (train, val, test) = chrono_split(samples, &suite.split)?;
    let data = SharedData { train, val, test };

    let cells = plan_cells(suite);
    let mut slots: Vec<Option<MetricReport>> = vec![None; cells.len()];
    let mut pending: Vec<usize> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match load_cached_report(&cell_cache_path(out_dir, &cell.run_id)) {
            Some(report) => slots[i] = Some(report),
            None => pending.push(i),
        }
    }

    let workers = if suite.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        suite.threads
    }
    .min(pending.len().max(1));

    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, MetricReport)>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<Error>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::Relaxed);
                let Some(&idx) = pending.get(slot) else { break };
                let cell = &cells[idx];
                match run_cell(table, &data, suite, cell, out_dir) {
                    Ok(report) => {
                        let write = serde_json::to_vec_pretty(&report)
                            .map_err(|e| Error::Format(format!("report serialization: {e}")))
                            .and_then(|bytes| {
                                fs::write(cell_cache_path(out_dir, &cell.run_id), bytes)
                                    .map_err(Error::from)
                            });
                        match write {
                            Ok(()) => done.lock().unwrap().push((idx, report)),
                            Err(e) => failures.lock().unwrap().push(e),
                        }
                    }
                    Err(e) => failures.lock().unwrap().push(e),
                }
            });
        }
    });
    for (idx, report) in done.into_inner().unwrap() {
        slots[idx] = Some(report);
    }
    if let Some(err) = failures.into_inner().unwrap().into_iter().next() {
        return Err(err);
    }

    let reports: Vec<MetricReport> =
        slots.into_iter().map(|s| s.expect("no failures, so every cell completed")).collect();
    let text = serde_json::to_vec_pretty(&reports)
        .map_err(|e| Error::Format(format!("reports serialization: {e}")))?;
    fs::write(out_dir.join("reports.json"), text)?;
    fs::write(out_dir.join("table.md"), render_table(&reports))?;
    Ok(reports)
}

/// Markdown comparison table with the published reference values alongside,
/// in columns labeled "(paper)".
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut text = String::new();
    text.push_str("| Model | Epochs | RMSE | R2 | RMSE (paper) | R2 (paper) | Wall (s) |\n");
    text.push_str("|---|---|---|---|---|---|---|\n");
    for r in reports {
        let (prmse, pr2) = match paper_ref(r.kind, r.epochs) {
            Some(p) => (format!("{:.4}", p.rmse), format!("{:.4}", p.r2)),
            None => ("-".to_string(), "-".to_string()),
        };
        text.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {} | {} | {:.1} |\n",
            r.kind.label(),
            r.epochs,
            r.rmse,
            r.r2,
            prmse,
            pr2,
            r.wall_secs
        ));
    }
    text
}
