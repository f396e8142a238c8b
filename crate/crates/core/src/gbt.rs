//! Newton-boosted regression trees with soft-threshold (L1) leaf weights.
//!
//! Each round fits one tree to the gradient/Hessian statistics of the
//! squared loss by exact greedy split search over midpoint thresholds of
//! sorted feature values. Ties between equal-gain splits go to the lowest
//! feature index, then the lowest threshold, so fitting is deterministic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const GBT_FORMAT_TAG: &str = "bttf-gbt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GBTConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub eta: f64,
    /// Weight of the absolute-value penalty on leaf weights.
    pub reg_l1: f64,
    /// Optional quadratic penalty added to the Hessian in the leaf solution.
    pub reg_l2: f64,
    pub min_gain: f64,
    pub min_leaf: usize,
    /// Recorded for reproducibility; exact greedy search draws nothing from
    /// it (no row or column subsampling here).
    pub seed: u64,
}

impl Default for GBTConfig {
    fn default() -> Self {
        GBTConfig {
            n_rounds: 100,
            max_depth: 6,
            eta: 0.3,
            reg_l1: 1.0,
            reg_l2: 0.0,
            min_gain: 0.0,
            min_leaf: 1,
            seed: 0,
        }
    }
}

impl GBTConfig {
    /// Names every out-of-range field in one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_rounds < 1 {
            bad.push("n_rounds");
        }
        if self.max_depth < 1 {
            bad.push("max_depth");
        }
        if !(self.eta.is_finite() && self.eta > 0.0 && self.eta <= 1.0) {
            bad.push("eta");
        }
        if !(self.reg_l1.is_finite() && self.reg_l1 >= 0.0) {
            bad.push("reg_l1");
        }
        if !(self.reg_l2.is_finite() && self.reg_l2 >= 0.0) {
            bad.push("reg_l2");
        }
        if !(self.min_gain.is_finite() && self.min_gain >= 0.0) {
            bad.push("min_gain");
        }
        if self.min_leaf < 1 {
            bad.push("min_leaf");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("gbt config fields out of range: {}", bad.join(", "))))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { weight: f64 },
}

/// Binary tree stored as a node array with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    /// Leaf weight reached by routing `x`; values equal to a threshold go
    /// left.
    pub fn route(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Split { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTreeModel {
    pub config: GBTConfig,
    /// Initial prediction: the training-target mean.
    pub base_score: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<RegressionTree>,
    /// Training objective (squared loss plus penalties on the shrunken leaf
    /// weights) after 0, 1, …, n_rounds trees.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

/// Split counts per feature, the F-score of an importance plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub names: Vec<String>,
    pub counts: Vec<u64>,
}

impl FeatureImportance {
    /// Feature indices from most to least split on; equal counts keep
    /// index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|a, b| self.counts[*b].cmp(&self.counts[*a]).then(a.cmp(b)));
        order
    }
}

/// Gradient and Hessian of the per-sample loss ½(pred − target)².
pub fn grad_hess_squared(pred: &[f64], target: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "grad_hess_squared: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let g = pred.iter().zip(target).map(|(p, y)| p - y).collect();
    let h = vec![1.0; pred.len()];
    Ok((g, h))
}

/// Minimizer of G·w + ½(H + reg_l2)·w² + reg_l1·|w|: the soft-threshold
/// solution −sign(G)·max(|G| − reg_l1, 0) / (H + reg_l2).
pub fn leaf_weight(g_sum: f64, h_sum: f64, reg_l1: f64, reg_l2: f64) -> Result<f64> {
    if h_sum <= 0.0 {
        return Err(Error::Contract(format!("degenerate leaf: H = {h_sum} must be positive")));
    }
    let shrunk = (g_sum.abs() - reg_l1).max(0.0);
    Ok(-g_sum.signum() * shrunk / (h_sum + reg_l2))
}

/// Negated leaf objective at the optimal weight; higher is better.
fn leaf_score(g_sum: f64, h_sum: f64, reg_l1: f64, reg_l2: f64) -> f64 {
    let shrunk = (g_sum.abs() - reg_l1).max(0.0);
    shrunk * shrunk / (2.0 * (h_sum + reg_l2))
}

/// Gain of splitting a node with statistics `parent` into `left` and
/// `right`. Returns `Some(gain)` when the split clears `min_gain`, `None`
/// when the node should stay a leaf.
pub fn split_gain(
    parent: (f64, f64),
    left: (f64, f64),
    right: (f64, f64),
    reg_l1: f64,
    reg_l2: f64,
    min_gain: f64,
) -> Result<Option<f64>> {
    let tol_g = 1e-9 * parent.0.abs().max(1.0);
    let tol_h = 1e-9 * parent.1.abs().max(1.0);
    if (left.0 + right.0 - parent.0).abs() > tol_g || (left.1 + right.1 - parent.1).abs() > tol_h {
        return Err(Error::Contract(format!(
            "split statistics do not sum to the parent: {left:?} + {right:?} != {parent:?}"
        )));
    }
    let gain = leaf_score(left.0, left.1, reg_l1, reg_l2)
        + leaf_score(right.0, right.1, reg_l1, reg_l2)
        - leaf_score(parent.0, parent.1, reg_l1, reg_l2);
    Ok(if gain > min_gain { Some(gain) } else { None })
}

struct TreeBuilder<'a> {
    features: &'a Tensor,
    g: &'a [f64],
    h: &'a [f64],
    cfg: &'a GBTConfig,
    d: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn feature(&self, row: usize, col: usize) -> f64 {
        self.features.data()[row * self.d + col]
    }

    fn build(&mut self, members: &mut [usize], depth: usize) -> Result<usize> {
        let g_sum: f64 = members.iter().map(|&i| self.g[i]).sum();
        let h_sum: f64 = members.iter().map(|&i| self.h[i]).sum();
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { weight: 0.0 });

        let best = if depth < self.cfg.max_depth && members.len() >= 2 * self.cfg.min_leaf {
            self.best_split(members, g_sum, h_sum)
        } else {
            None
        };
        match best {
            None => {
                let weight = leaf_weight(g_sum, h_sum, self.cfg.reg_l1, self.cfg.reg_l2)?;
                self.nodes[idx] = TreeNode::Leaf { weight };
            }
            Some((feature, threshold)) => {
                let at = partition(members, |i| self.feature(i, feature) <= threshold);
                let (left_members, right_members) = members.split_at_mut(at);
                // Placeholder is replaced once both children exist; child
                // slices are disjoint so recursion order is immaterial.
                let left = self.build_slice(left_members, depth + 1)?;
                let right = self.build_slice(right_members, depth + 1)?;
                self.nodes[idx] = TreeNode::Split { feature, threshold, left, right };
            }
        }
        Ok(idx)
    }

    fn build_slice(&mut self, members: &mut [usize], depth: usize) -> Result<usize> {
        self.build(members, depth)
    }

    /// Exact greedy search over every feature and every midpoint between
    /// adjacent distinct values. First strictly-better gain wins, and the
    /// scan order (feature ascending, threshold ascending) makes that the
    /// lowest feature index then lowest threshold among ties.
    fn best_split(&self, members: &[usize], g_sum: f64, h_sum: f64) -> Option<(usize, f64)> {
        let parent_score = leaf_score(g_sum, h_sum, self.cfg.reg_l1, self.cfg.reg_l2);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(members.len());
        for feature in 0..self.d {
            sorted.clear();
            sorted.extend(members.iter().map(|&i| (self.feature(i, feature), i)));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

            let mut gl = 0.0;
            let mut hl = 0.0;
            for pos in 0..sorted.len() - 1 {
                let (v, i) = sorted[pos];
                gl += self.g[i];
                hl += self.h[i];
                let v_next = sorted[pos + 1].0;
                if v == v_next {
                    continue;
                }
                let count_left = pos + 1;
                let count_right = sorted.len() - count_left;
                if count_left < self.cfg.min_leaf || count_right < self.cfg.min_leaf {
                    continue;
                }
                let gain = leaf_score(gl, hl, self.cfg.reg_l1, self.cfg.reg_l2)
                    + leaf_score(g_sum - gl, h_sum - hl, self.cfg.reg_l1, self.cfg.reg_l2)
                    - parent_score;
                if gain <= self.cfg.min_gain {
                    continue;
                }
                if best.map_or(true, |(bg, _, _)| gain > bg) {
                    // Midpoint, nudged down if rounding lands on the upper
                    // value so `x <= threshold` keeps the intended halves.
                    let mut threshold = v + (v_next - v) / 2.0;
                    if threshold >= v_next {
                        threshold = v;
                    }
                    best = Some((gain, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Stable partition: reorders `xs` so elements satisfying `pred` come first,
/// preserving relative order on both sides; returns the boundary.
fn partition(xs: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut left = Vec::with_capacity(xs.len());
    let mut right = Vec::with_capacity(xs.len());
    for &x in xs.iter() {
        if pred(x) {
            left.push(x);
        } else {
            right.push(x);
        }
    }
    let at = left.len();
    xs[..at].copy_from_slice(&left);
    xs[at..].copy_from_slice(&right);
    at
}

/// Fit `n_rounds` trees on gradient statistics of the squared loss. The
/// recorded objective adds the penalties on the shrunken (eta-scaled) leaf
/// contributions, which is the quantity each greedy round cannot increase.
pub fn fit_gbt(features: &Tensor, targets: &[f64], cfg: &GBTConfig) -> Result<BoostedTreeModel> {
    cfg.validate()?;
    let (n, d) = features.dims2()?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} feature rows vs {} targets", targets.len())));
    }
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 training rows, got {n}")));
    }
    if !features.is_finite() || targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Data("non-finite training data".into()));
    }

    let base_score = targets.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut penalty = 0.0;
    let squared = |pred: &[f64]| -> f64 {
        pred.iter().zip(targets).map(|(p, y)| 0.5 * (p - y) * (p - y)).sum()
    };
    let mut objective_trace = vec![squared(&pred)];

    let mut trees = Vec::with_capacity(cfg.n_rounds);
    let mut members: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.n_rounds {
        let (g, h) = grad_hess_squared(&pred, targets)?;
        let mut builder =
            TreeBuilder { features, g: &g, h: &h, cfg, d, nodes: Vec::new() };
        members.clear();
        members.extend(0..n);
        builder.build(&mut members, 0)?;
        let tree = RegressionTree { nodes: builder.nodes };

        for (i, p) in pred.iter_mut().enumerate() {
            *p += cfg.eta * tree.route(features.row2(i)?);
        }
        for node in &tree.nodes {
            if let TreeNode::Leaf { weight } = node {
                let effective = cfg.eta * weight;
                penalty += cfg.reg_l1 * effective.abs() + 0.5 * cfg.reg_l2 * effective * effective;
            }
        }
        objective_trace.push(squared(&pred) + penalty);
        trees.push(tree);
    }

    Ok(BoostedTreeModel {
        config: *cfg,
        base_score,
        feature_names: (0..d).map(|i| format!("f{i}")).collect(),
        trees,
        objective_trace,
    })
}

impl BoostedTreeModel {
    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.feature_names.len() {
            return Err(Error::Shape(format!(
                "{} names for {} features",
                names.len(),
                self.feature_names.len()
            )));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }
}

/// Ensemble prediction for one row: base score plus the shrunken leaf
/// weights along each tree's routing path.
pub fn predict_gbt(model: &BoostedTreeModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.n_features() {
        return Err(Error::Shape(format!(
            "input width {} does not match model width {}",
            x.len(),
            model.n_features()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite prediction input".into()));
    }
    let mut y = model.base_score;
    for tree in &model.trees {
        y += model.config.eta * tree.route(x);
    }
    Ok(y)
}

/// Split counts per feature across every tree.
pub fn feature_importance(model: &BoostedTreeModel) -> FeatureImportance {
    let mut counts = vec![0u64; model.n_features()];
    for tree in &model.trees {
        for node in &tree.nodes {
            if let TreeNode::Split { feature, .. } = node {
                counts[*feature] += 1;
            }
        }
    }
    FeatureImportance { names: model.feature_names.clone(), counts }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    #[serde(flatten)]
    model: BoostedTreeModel,
}

pub fn save_gbt(path: &Path, model: &BoostedTreeModel) -> Result<()> {
    let file = ModelFile { format: GBT_FORMAT_TAG.to_string(), model: model.clone() };
    let json = serde_json::to_vec_pretty(&file)
        .map_err(|e| Error::Format(format!("model serialization failed: {e}")))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, json)?;
    Ok(())
}

pub fn load_gbt(path: &Path) -> Result<BoostedTreeModel> {
    let bytes = fs::read(path)?;
    let file: ModelFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: bad model file: {e}", path.display())))?;
    if file.format != GBT_FORMAT_TAG {
        return Err(Error::Format(format!(
            "expected format tag {GBT_FORMAT_TAG:?}, file has {:?}",
            file.format
        )));
    }
    file.model.config.validate()?;
    Ok(file.model)
}

impl Tensor {
    /// Row `i` of a 2-D tensor as a slice.
    pub fn row2(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = self.dims2()?;
        if i >= r {
            return Err(Error::Shape(format!("row {i} out of {r}")));
        }
        Ok(&self.data()[i * c..(i + 1) * c])
    }
}
