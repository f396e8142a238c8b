//! Two-stage estimator: a sequence forecaster feeds a boosted-tree decision
//! stage whose output adjusts a persistence anchor, plus the streaming
//! forecast/adapt loop.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{TimeSeriesTable, WindowSample};
use crate::error::{Error, Result};
use crate::gbt::{fit_gbt, load_gbt, predict_gbt, save_gbt, BoostedTreeModel, GBTConfig};
use crate::numcore::Tensor;
use crate::visionary::{
    load_visionary, save_visionary, train_visionary, Forecaster, LearningCurve, VisionaryConfig,
    VisionaryModel,
};

pub const BUNDLE_FORMAT_TAG: &str = "bttf-bundle-v1";

pub const BUNDLE_MANIFEST: &str = "bundle.json";
pub const BUNDLE_VISIONARY: &str = "visionary.bttf";
pub const BUNDLE_DECISION: &str = "decision.json";

/// What the decision stage's output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Output is the adjustment added to the persistence anchor.
    #[default]
    Residual,
    /// Output is the adjusted estimate itself.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BTTFConfig {
    pub visionary: VisionaryConfig,
    pub gbt: GBTConfig,
    pub adaptation_mode: AdaptationMode,
    /// Steps between decision-stage refits in the feedback loop; 0 = never.
    pub refit_interval: usize,
}

impl Default for BTTFConfig {
    fn default() -> Self {
        BTTFConfig {
            visionary: VisionaryConfig::default(),
            gbt: GBTConfig::default(),
            adaptation_mode: AdaptationMode::Residual,
            refit_interval: 0,
        }
    }
}

impl BTTFConfig {
    pub fn validate(&self) -> Result<()> {
        self.visionary.validate()?;
        self.gbt.validate()
    }
}

/// Order and meaning of the decision stage's inputs: the present features
/// first, then the forecast values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub present_names: Vec<String>,
    pub horizon: usize,
}

impl FeatureLayout {
    /// Placeholder present-feature names, for callers that only know widths.
    pub fn generic(d_present: usize, horizon: usize) -> Self {
        FeatureLayout {
            present_names: (0..d_present).map(|i| format!("present_{i}")).collect(),
            horizon,
        }
    }

    pub fn d_present(&self) -> usize {
        self.present_names.len()
    }

    /// Total decision-stage input width.
    pub fn width(&self) -> usize {
        self.present_names.len() + self.horizon
    }

    /// Column names in input order.
    pub fn names(&self) -> Vec<String> {
        let mut names = self.present_names.clone();
        for i in 1..=self.horizon {
            names.push(format!("forecast_{i}"));
        }
        names
    }
}

/// One present-state estimate: the anchor, the adjustment, and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedState {
    pub x_t: f64,
    pub delta: f64,
    pub x_adjusted: f64,
}

/// Apply an adjustment to an anchor: `{x_t, delta, x_t + delta}`.
pub fn adapt_present(x_t: f64, delta: f64) -> Result<AdjustedState> {
    if !x_t.is_finite() || !delta.is_finite() {
        return Err(Error::Numeric(format!(
            "adjustment needs finite inputs, got anchor {x_t} and delta {delta}"
        )));
    }
    Ok(AdjustedState { x_t, delta, x_adjusted: x_t + delta })
}

/// Concatenate `[present…, forecast…]` in the layout's declared order.
/// Both parts are in original (denormalized) units.
pub fn assemble_decision_features(
    present: &[f64],
    forecast: &[f64],
    layout: &FeatureLayout,
) -> Result<Vec<f64>> {
    if layout.horizon == 0 {
        return Err(Error::Config("decision features need a forecast horizon >= 1".into()));
    }
    if present.len() != layout.d_present() || forecast.len() != layout.horizon {
        return Err(Error::Shape(format!(
            "feature layout expects {} present + {} forecast values, got {} + {}",
            layout.d_present(),
            layout.horizon,
            present.len(),
            forecast.len()
        )));
    }
    let mut out = Vec::with_capacity(layout.width());
    out.extend_from_slice(present);
    out.extend_from_slice(forecast);
    Ok(out)
}

/// The trained two-stage estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BTTFModel {
    pub visionary: VisionaryModel,
    pub decision: BoostedTreeModel,
    pub layout: FeatureLayout,
    pub mode: AdaptationMode,
}

impl BTTFModel {
    /// Normalization fitted in stage 1; the decision stage never sees
    /// normalized values.
    pub fn norm_stats(&self) -> &crate::dataio::NormStats {
        &self.visionary.norm_stats
    }

    /// Replace the placeholder present-feature names with real ones, both in
    /// the layout and on the decision model.
    pub fn set_present_names(&mut self, names: &[String]) -> Result<()> {
        if names.len() != self.layout.d_present() {
            return Err(Error::Shape(format!(
                "{} names for {} present features",
                names.len(),
                self.layout.d_present()
            )));
        }
        self.layout.present_names = names.to_vec();
        self.decision = self.decision.clone().with_feature_names(self.layout.names())?;
        Ok(())
    }

    fn check_widths(&self) -> Result<()> {
        if self.decision.n_features() != self.layout.width() {
            return Err(Error::Contract(format!(
                "decision stage takes {} inputs but the layout declares {}",
                self.decision.n_features(),
                self.layout.width()
            )));
        }
        if self.layout.horizon != self.visionary.config.h {
            return Err(Error::Contract(format!(
                "layout horizon {} differs from forecaster horizon {}",
                self.layout.horizon, self.visionary.config.h
            )));
        }
        Ok(())
    }
}

/// Anchor for a window: the last observed value of the target feature.
fn window_anchor(window: &Tensor, target_index: usize) -> Result<f64> {
    let (k, d) = window.dims2()?;
    if target_index >= d {
        return Err(Error::Shape(format!("target index {target_index} out of {d} features")));
    }
    Ok(window.at(k - 1, target_index))
}

/// Fit the decision stage on forecaster outputs: one row per sample, built
/// as `[present, forecast]` in original units. In residual mode the target
/// is `y - anchor`; in direct mode it is `y` itself, where `y` is the first
/// horizon value and the anchor is the last observed target value in the
/// window.
pub fn fit_decision_stage<F: Forecaster + ?Sized>(
    forecaster: &F,
    train: &[WindowSample],
    target_index: usize,
    mode: AdaptationMode,
    gbt_cfg: &GBTConfig,
) -> Result<(BoostedTreeModel, FeatureLayout)> {
    let first = train
        .first()
        .ok_or_else(|| Error::Data("decision stage needs a nonempty training set".into()))?;
    let layout = FeatureLayout::generic(first.present.len(), forecaster.horizon());

    let n = train.len();
    let width = layout.width();
    let mut xs = Vec::with_capacity(n * width);
    let mut ys = Vec::with_capacity(n);
    for s in train {
        let forecast = forecaster.forecast(&s.window)?;
        let features = assemble_decision_features(&s.present, &forecast, &layout)?;
        xs.extend_from_slice(&features);
        let y = *s
            .target
            .first()
            .ok_or_else(|| Error::Shape(format!("sample at origin {} has no target", s.t_index)))?;
        let anchor = window_anchor(&s.window, target_index)?;
        ys.push(match mode {
            AdaptationMode::Residual => y - anchor,
            AdaptationMode::Direct => y,
        });
    }
    let x = Tensor::new(vec![n, width], xs)?;
    let model = fit_gbt(&x, &ys, gbt_cfg)?.with_feature_names(layout.names())?;
    Ok((model, layout))
}

/// Two-stage training: fit the forecaster on the windows, then fit the
/// decision stage on its in-sample forecasts. The validation set only feeds
/// the forecaster's learning curve.
pub fn train_bttf(
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &BTTFConfig,
) -> Result<(BTTFModel, LearningCurve)> {
    cfg.validate()?;
    let (visionary, curve) = train_visionary(train, val, &cfg.visionary)?;
    let (decision, layout) = fit_decision_stage(
        &visionary,
        train,
        cfg.visionary.target_index,
        cfg.adaptation_mode,
        &cfg.gbt,
    )?;
    let model = BTTFModel { visionary, decision, layout, mode: cfg.adaptation_mode };
    model.check_widths()?;
    Ok((model, curve))
}

/// Predict through an arbitrary forecaster and decision stage. In residual
/// mode the decision output is the delta over the anchor; in direct mode it
/// is the adjusted estimate and the delta is derived from it.
pub fn predict_with<F: Forecaster + ?Sized>(
    forecaster: &F,
    decision: &BoostedTreeModel,
    layout: &FeatureLayout,
    mode: AdaptationMode,
    target_index: usize,
    window: &Tensor,
    present: &[f64],
) -> Result<AdjustedState> {
    let forecast = forecaster.forecast(window)?;
    let features = assemble_decision_features(present, &forecast, layout)?;
    let out = predict_gbt(decision, &features)?;
    let anchor = window_anchor(window, target_index)?;
    match mode {
        AdaptationMode::Residual => adapt_present(anchor, out),
        AdaptationMode::Direct => {
            if !anchor.is_finite() || !out.is_finite() {
                return Err(Error::Numeric(format!(
                    "adjustment needs finite inputs, got anchor {anchor} and estimate {out}"
                )));
            }
            Ok(AdjustedState { x_t: anchor, delta: out - anchor, x_adjusted: out })
        }
    }
}

pub fn predict_bttf(model: &BTTFModel, window: &Tensor, present: &[f64]) -> Result<AdjustedState> {
    predict_with(
        &model.visionary,
        &model.decision,
        &model.layout,
        model.mode,
        model.visionary.config.target_index,
        window,
        present,
    )
}

/// Slide over the stream one step at a time, emitting an adjusted state per
/// origin from index `k` onward. With `refit_interval > 0` the decision
/// stage (only) is refit on all pairs seen so far every that many steps; the
/// forecaster is never retrained.
pub fn feedback_loop(
    model: &BTTFModel,
    stream: &TimeSeriesTable,
    cfg: &BTTFConfig,
) -> Result<Vec<AdjustedState>> {
    let k = model.visionary.config.k;
    let target_index = model.visionary.config.target_index;
    let t_len = stream.n_rows();
    let d = stream.n_cols();
    if t_len <= k {
        return Err(Error::Data(format!(
            "stream of {t_len} rows is too short for window length {k}; need at least {}",
            k + 1
        )));
    }
    if d != model.visionary.d_in() {
        return Err(Error::Shape(format!(
            "stream has {d} features, model was trained on {}",
            model.visionary.d_in()
        )));
    }

    let mut decision = model.decision.clone();
    // (features, decision target) pairs for origins already stepped past.
    let mut seen_x: Vec<f64> = Vec::new();
    let mut seen_y: Vec<f64> = Vec::new();
    let width = model.layout.width();

    let mut out = Vec::with_capacity(t_len - k);
    for (step, t) in (k..t_len).enumerate() {
        if cfg.refit_interval > 0 && step > 0 && step % cfg.refit_interval == 0 && !seen_y.is_empty()
        {
            let x = Tensor::new(vec![seen_y.len(), width], seen_x.clone())?;
            decision = fit_gbt(&x, &seen_y, &cfg.gbt)?.with_feature_names(model.layout.names())?;
        }

        let mut window_data = Vec::with_capacity(k * d);
        for r in t - k..t {
            window_data.extend_from_slice(stream.row(r));
        }
        let window = Tensor::new(vec![k, d], window_data)?;
        let present: Vec<f64> = stream
            .row(t - 1)
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != target_index)
            .map(|(_, v)| *v)
            .collect();

        let forecast = model.visionary.forecast(&window)?;
        let features = assemble_decision_features(&present, &forecast, &model.layout)?;
        let estimate = predict_gbt(&decision, &features)?;
        let anchor = window_anchor(&window, target_index)?;
        let state = match model.mode {
            AdaptationMode::Residual => adapt_present(anchor, estimate)?,
            AdaptationMode::Direct => {
                if !anchor.is_finite() || !estimate.is_finite() {
                    return Err(Error::Numeric(format!(
                        "adjustment needs finite inputs, got anchor {anchor} and estimate {estimate}"
                    )));
                }
                AdjustedState { x_t: anchor, delta: estimate - anchor, x_adjusted: estimate }
            }
        };
        out.push(state);

        // The true value at this origin becomes training data for any
        // refit at a later step.
        let y = stream.value(t, target_index);
        seen_x.extend_from_slice(&features);
        seen_y.push(match model.mode {
            AdaptationMode::Residual => y - anchor,
            AdaptationMode::Direct => y,
        });
    }
    Ok(out)
}

/// Pass-through forecaster: "predicts" the last observed row of the window,
/// so its horizon equals the feature count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityForecaster {
    pub k: usize,
    pub d_in: usize,
}

impl Forecaster for IdentityForecaster {
    fn window_len(&self) -> usize {
        self.k
    }

    fn horizon(&self) -> usize {
        self.d_in
    }

    fn forecast(&self, window: &Tensor) -> Result<Vec<f64>> {
        let (k, d) = window.dims2()?;
        if k != self.k || d != self.d_in {
            return Err(Error::Contract(format!(
                "window is {k}x{d}, pass-through expects {}x{}",
                self.k, self.d_in
            )));
        }
        Ok(window.row2(k - 1)?.to_vec())
    }
}

/// Write the bundle into `dir`: a manifest referencing the two model files
/// written next to it.
pub fn save_bttf(dir: &Path, model: &BTTFModel) -> Result<()> {
    model.check_widths()?;
    fs::create_dir_all(dir)?;
    save_visionary(&dir.join(BUNDLE_VISIONARY), &model.visionary)?;
    save_gbt(&dir.join(BUNDLE_DECISION), &model.decision)?;
    let manifest = json!({
        "format": BUNDLE_FORMAT_TAG,
        "visionary": BUNDLE_VISIONARY,
        "decision": BUNDLE_DECISION,
        "layout": model.layout,
        "adaptation_mode": model.mode,
    });
    let text = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("bundle manifest serialization failed: {e}")))?;
    fs::write(dir.join(BUNDLE_MANIFEST), text)?;
    Ok(())
}

/// Load a bundle from its directory or its manifest path.
pub fn load_bttf(path: &Path) -> Result<BTTFModel> {
    let manifest_path: PathBuf =
        if path.is_dir() { path.join(BUNDLE_MANIFEST) } else { path.to_path_buf() };
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let bytes = fs::read(&manifest_path)?;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("bundle manifest is not valid JSON: {e}")))?;
    let tag = manifest.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if tag != BUNDLE_FORMAT_TAG {
        return Err(Error::Format(format!(
            "expected format {BUNDLE_FORMAT_TAG:?}, found {tag:?}"
        )));
    }
    let rel = |key: &str| -> Result<PathBuf> {
        manifest
            .get(key)
            .and_then(|v| v.as_str())
            .map(|s| dir.join(s))
            .ok_or_else(|| Error::Format(format!("bundle manifest is missing {key:?}")))
    };
    let layout: FeatureLayout =
        serde_json::from_value(manifest.get("layout").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("bad feature layout in bundle: {e}")))?;
    let mode: AdaptationMode =
        serde_json::from_value(manifest.get("adaptation_mode").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("bad adaptation mode in bundle: {e}")))?;
    let model = BTTFModel {
        visionary: load_visionary(&rel("visionary")?)?,
        decision: load_gbt(&rel("decision")?)?,
        layout,
        mode,
    };
    model.check_widths()?;
    Ok(model)
}
