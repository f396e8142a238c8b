//! Encoder-only self-attention forecaster: maps a window of `k` past
//! observations to a forecast over the next `h` steps of one target feature.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{normalize_apply, normalize_fit, NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::numcore::{
    adam_step, read_container, read_tensor_blob, tensor_blob_bytes, write_container, AdamParams,
    AdamState, Graph, NodeId, SeedRng, Tensor,
};

pub const VISIONARY_FORMAT_TAG: &str = "bttf-visionary-v1";

/// Layer-norm variance floor, fixed across training and inference.
const LN_EPS: f64 = 1e-5;

/// Training objective. Mean squared error is the default; mean absolute
/// error is the drop-in alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionaryConfig {
    /// Input window length in time steps.
    pub k: usize,
    /// Forecast horizon in time steps.
    pub h: usize,
    /// Embedding width. Must be even and divisible by `n_heads`.
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder blocks (attention + feed-forward).
    pub n_layers: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Which input feature the forecast is for.
    pub target_index: usize,
    pub loss: LossKind,
}

impl Default for VisionaryConfig {
    fn default() -> Self {
        VisionaryConfig {
            k: 7,
            h: 1,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            target_index: 0,
            loss: LossKind::Mse,
        }
    }
}

impl VisionaryConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k < 1 {
            bad.push("k (must be >= 1)");
        }
        if self.h < 1 {
            bad.push("h (must be >= 1)");
        }
        if self.d_model < 2 || self.d_model % 2 != 0 {
            bad.push("d_model (must be even and >= 2)");
        }
        if self.n_heads < 1 || self.d_model % self.n_heads.max(1) != 0 {
            bad.push("n_heads (must divide d_model)");
        }
        if self.n_layers < 1 {
            bad.push("n_layers (must be >= 1)");
        }
        if self.d_ff < 1 {
            bad.push("d_ff (must be >= 1)");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push("lr (must be positive)");
        }
        if self.batch_size < 1 {
            bad.push("batch_size (must be >= 1)");
        }
        if self.epochs < 1 {
            bad.push("epochs (must be >= 1)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid forecaster config: {}", bad.join(", "))))
        }
    }
}

/// Sinusoidal positional encoding: even columns sin(pos / 10000^(2i/d)),
/// odd columns the paired cosine.
pub fn positional_encoding(k: usize, d_model: usize) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::Config("positional encoding needs k >= 1".into()));
    }
    if d_model < 2 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model >= 2, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(k * d_model);
    for pos in 0..k {
        for col in 0..d_model {
            let pair = (col / 2) as f64;
            let rate = 10000f64.powf(2.0 * pair / d_model as f64);
            let angle = pos as f64 / rate;
            data.push(if col % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![k, d_model], data)
}

/// Node handles for one attention block's projection matrices.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub n_heads: usize,
}

/// Multi-head scaled dot-product self-attention over a single `[k, d_model]`
/// sequence. Returns the projected output and the per-head attention weight
/// nodes (row-stochastic `[k, k]` matrices).
pub fn multi_head_attention(
    g: &mut Graph,
    x: NodeId,
    params: &AttentionParams,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (rows, _) = g.value(x).dims2()?;
    attention_batched(g, x, 1, rows, params)
}

/// Attention over `batch` independent sequences stacked row-wise as
/// `[batch * k, d_model]`. Projections run as one matmul across the stack;
/// score/softmax/mix run per sample so sequences never attend across the
/// batch boundary.
fn attention_batched(
    g: &mut Graph,
    x_all: NodeId,
    batch: usize,
    k: usize,
    params: &AttentionParams,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (rows, d_model) = g.value(x_all).dims2()?;
    if rows != batch * k {
        return Err(Error::Shape(format!(
            "attention input has {rows} rows, expected batch {batch} x k {k}"
        )));
    }
    if params.n_heads == 0 || d_model % params.n_heads != 0 {
        return Err(Error::Shape(format!(
            "{} heads do not divide width {d_model}",
            params.n_heads
        )));
    }
    let d_head = d_model / params.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q_all = g.matmul(x_all, params.wq)?;
    let k_all = g.matmul(x_all, params.wk)?;
    let v_all = g.matmul(x_all, params.wv)?;

    // head index -> per-sample mixed values, each [k, d_head]
    let mut head_parts: Vec<Vec<NodeId>> = vec![Vec::with_capacity(batch); params.n_heads];
    let mut weights = Vec::with_capacity(batch * params.n_heads);
    for b in 0..batch {
        let qb = g.slice_rows(q_all, b * k, k)?;
        let kb = g.slice_rows(k_all, b * k, k)?;
        let vb = g.slice_rows(v_all, b * k, k)?;
        for head in 0..params.n_heads {
            let qh = g.slice_cols(qb, head * d_head, d_head)?;
            let kh = g.slice_cols(kb, head * d_head, d_head)?;
            let vh = g.slice_cols(vb, head * d_head, d_head)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let w = g.softmax_rows(scaled)?;
            weights.push(w);
            head_parts[head].push(g.matmul(w, vh)?);
        }
    }
    let mut head_cols = Vec::with_capacity(params.n_heads);
    for parts in &head_parts {
        head_cols.push(if batch == 1 { parts[0] } else { g.concat_rows(parts)? });
    }
    let cat = if head_cols.len() == 1 { head_cols[0] } else { g.concat_cols(&head_cols)? };
    let out = g.matmul(cat, params.wo)?;
    Ok((out, weights))
}

/// Node handles for one encoder block.
#[derive(Debug, Clone)]
struct LayerNodes {
    attn: AttentionParams,
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
}

/// Node handles for the whole model, in the fixed parameter order shared by
/// the optimizer, the gradient checker, and the model file.
#[derive(Debug, Clone)]
struct NodeParams {
    w_in: NodeId,
    b_in: NodeId,
    layers: Vec<LayerNodes>,
    w_head: NodeId,
    b_head: NodeId,
}

impl NodeParams {
    /// Rebuild the handle structure from leaves inserted in canonical order.
    fn from_ids(cfg: &VisionaryConfig, ids: &[NodeId]) -> Result<NodeParams> {
        let expected = 2 + cfg.n_layers * PARAMS_PER_LAYER + 2;
        if ids.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter nodes, got {}",
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let w_in = next();
        let b_in = next();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerNodes {
                attn: AttentionParams {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wo: next(),
                    n_heads: cfg.n_heads,
                },
                ln1_gain: next(),
                ln1_bias: next(),
                ffn_w1: next(),
                ffn_b1: next(),
                ffn_w2: next(),
                ffn_b2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            });
        }
        let w_head = next();
        let b_head = next();
        Ok(NodeParams { w_in, b_in, layers, w_head, b_head })
    }
}

const PARAMS_PER_LAYER: usize = 12;

/// Full forward pass over `batch` sequences stacked as `[batch * k, d_in]`:
/// project, add positional encoding, run the encoder blocks, read the last
/// position of each sequence, apply the head. Returns the `[batch, h]`
/// forecast node and every attention weight node.
fn forward_nodes(
    g: &mut Graph,
    x_all: NodeId,
    batch: usize,
    cfg: &VisionaryConfig,
    p: &NodeParams,
) -> Result<(NodeId, Vec<NodeId>)> {
    let proj = g.matmul(x_all, p.w_in)?;
    let proj = g.add_row(proj, p.b_in)?;

    let pe = positional_encoding(cfg.k, cfg.d_model)?;
    let mut tiled = Vec::with_capacity(batch * cfg.k * cfg.d_model);
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe_node = g.leaf(Tensor::new(vec![batch * cfg.k, cfg.d_model], tiled)?);

    let mut cur = g.add(proj, pe_node)?;
    let mut all_weights = Vec::new();
    for layer in &p.layers {
        let (att, mut w) = attention_batched(g, cur, batch, cfg.k, &layer.attn)?;
        all_weights.append(&mut w);
        let res = g.add(cur, att)?;
        let n1 = g.layer_norm_rows(res, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
        let f1 = g.matmul(n1, layer.ffn_w1)?;
        let f1 = g.add_row(f1, layer.ffn_b1)?;
        let a1 = g.relu(f1)?;
        let f2 = g.matmul(a1, layer.ffn_w2)?;
        let f2 = g.add_row(f2, layer.ffn_b2)?;
        let res2 = g.add(n1, f2)?;
        cur = g.layer_norm_rows(res2, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
    }

    let mut lasts = Vec::with_capacity(batch);
    for b in 0..batch {
        lasts.push(g.slice_rows(cur, b * cfg.k + cfg.k - 1, 1)?);
    }
    let read = if batch == 1 { lasts[0] } else { g.concat_rows(&lasts)? };
    let out = g.matmul(read, p.w_head)?;
    let out = g.add_row(out, p.b_head)?;
    Ok((out, all_weights))
}

/// Trained forecaster: parameters, the config that shaped them, and the
/// normalization fitted on the training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionaryModel {
    pub config: VisionaryConfig,
    pub norm_stats: NormStats,
    d_in: usize,
    params: Vec<Tensor>,
}

impl VisionaryModel {
    /// Input feature count the model was trained on.
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Canonical parameter names, index-aligned with `params`.
    fn param_names(cfg: &VisionaryConfig) -> Vec<String> {
        let mut names = vec!["w_in".to_string(), "b_in".to_string()];
        for l in 0..cfg.n_layers {
            for part in [
                "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ffn_w1", "ffn_b1", "ffn_w2",
                "ffn_b2", "ln2_gain", "ln2_bias",
            ] {
                names.push(format!("layer{l}.{part}"));
            }
        }
        names.push("w_head".to_string());
        names.push("b_head".to_string());
        names
    }

    /// Fresh model with scaled-normal weight matrices, zero biases, and
    /// unit layer-norm gains. The output head starts at zero so the first
    /// forecasts are zero and the initial loss equals the target variance;
    /// it picks up gradient on the first step.
    fn init(cfg: &VisionaryConfig, d_in: usize, norm_stats: NormStats, rng: &mut SeedRng) -> Result<Self> {
        let xavier = |rng: &mut SeedRng, rows: usize, cols: usize| -> Result<Tensor> {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal() * std).collect())
        };
        let d = cfg.d_model;
        let mut params = Vec::new();
        params.push(xavier(rng, d_in, d)?);
        params.push(Tensor::zeros(vec![1, d]));
        for _ in 0..cfg.n_layers {
            params.push(xavier(rng, d, d)?); // wq
            params.push(xavier(rng, d, d)?); // wk
            params.push(xavier(rng, d, d)?); // wv
            params.push(xavier(rng, d, d)?); // wo
            params.push(Tensor::filled(vec![1, d], 1.0)); // ln1_gain
            params.push(Tensor::zeros(vec![1, d])); // ln1_bias
            params.push(xavier(rng, d, cfg.d_ff)?);
            params.push(Tensor::zeros(vec![1, cfg.d_ff]));
            params.push(xavier(rng, cfg.d_ff, d)?);
            params.push(Tensor::zeros(vec![1, d]));
            params.push(Tensor::filled(vec![1, d], 1.0)); // ln2_gain
            params.push(Tensor::zeros(vec![1, d])); // ln2_bias
        }
        params.push(Tensor::zeros(vec![d, cfg.h]));
        params.push(Tensor::zeros(vec![1, cfg.h]));
        Ok(VisionaryModel { config: cfg.clone(), norm_stats, d_in, params })
    }

    /// Insert every parameter as a graph leaf, in canonical order.
    fn insert_params(&self, g: &mut Graph, trainable: bool) -> (Vec<NodeId>, NodeParams) {
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|t| {
                let t = t.clone();
                g.leaf(if trainable { t.with_grad() } else { t })
            })
            .collect();
        let nodes = NodeParams::from_ids(&self.config, &ids)
            .expect("canonical order matches param_names");
        (ids, nodes)
    }

    fn assert_finite(&self) -> Result<()> {
        for (i, t) in self.params.iter().enumerate() {
            if !t.is_finite() {
                let names = Self::param_names(&self.config);
                return Err(Error::Numeric(format!(
                    "parameter {} is not finite after training",
                    names[i]
                )));
            }
        }
        Ok(())
    }
}

/// One training epoch's losses and wall time. Validation loss is absent
/// when no validation set was provided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningCurve {
    pub epochs: Vec<EpochRecord>,
}

impl LearningCurve {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Stack the windows of `samples[order]` into one `[B * k, d_in]` tensor and
/// their targets into `[B, h]`.
fn stack_batch(samples: &[WindowSample], order: &[usize], h: usize) -> Result<(Tensor, Tensor)> {
    let (k, d_in) = samples[order[0]].window.dims2()?;
    let b = order.len();
    let mut xs = Vec::with_capacity(b * k * d_in);
    let mut ys = Vec::with_capacity(b * h);
    for &idx in order {
        let s = &samples[idx];
        xs.extend_from_slice(s.window.data());
        ys.extend_from_slice(&s.target);
    }
    Ok((Tensor::new(vec![b * k, d_in], xs)?, Tensor::new(vec![b, h], ys)?))
}

fn loss_node(g: &mut Graph, pred: NodeId, target: NodeId, kind: LossKind) -> Result<NodeId> {
    let diff = g.sub(pred, target)?;
    let per_elem = match kind {
        LossKind::Mse => g.mul(diff, diff)?,
        LossKind::Mae => g.abs(diff)?,
    };
    g.mean_all(per_elem)
}

/// Mean loss of the model over already-normalized samples, without touching
/// gradients.
fn eval_loss(model: &VisionaryModel, samples: &[WindowSample]) -> Result<f64> {
    let cfg = &model.config;
    let mut total = 0.0;
    let mut count = 0usize;
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        let (x, y) = stack_batch(samples, chunk, cfg.h)?;
        let mut g = Graph::new();
        let (_, nodes) = model.insert_params(&mut g, false);
        let x_id = g.leaf(x);
        let y_id = g.leaf(y);
        let (pred, _) = forward_nodes(&mut g, x_id, chunk.len(), cfg, &nodes)?;
        let loss = loss_node(&mut g, pred, y_id, cfg.loss)?;
        total += g.scalar_value(loss)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

fn check_samples(samples: &[WindowSample], cfg: &VisionaryConfig, what: &str) -> Result<usize> {
    let mut d_in = None;
    for s in samples {
        let (k, d) = s.window.dims2()?;
        if k != cfg.k {
            return Err(Error::Shape(format!(
                "{what} sample at origin {} has window length {k}, config says {}",
                s.t_index, cfg.k
            )));
        }
        if s.target.len() != cfg.h {
            return Err(Error::Shape(format!(
                "{what} sample at origin {} has target length {}, config says {}",
                s.t_index,
                s.target.len(),
                cfg.h
            )));
        }
        match d_in {
            None => d_in = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Shape(format!(
                    "{what} samples mix feature widths {prev} and {d}"
                )));
            }
            _ => {}
        }
    }
    Ok(d_in.unwrap_or(0))
}

/// Train on raw-unit samples: fits normalization on the training set alone,
/// then minimizes the configured loss over mini-batches with Adam for
/// `cfg.epochs` epochs. The validation set only feeds the learning curve.
pub fn train_visionary(
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &VisionaryConfig,
) -> Result<(VisionaryModel, LearningCurve)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("cannot train the forecaster on an empty set".into()));
    }
    let d_in = check_samples(train, cfg, "train")?;
    if !val.is_empty() {
        let vd = check_samples(val, cfg, "validation")?;
        if vd != d_in {
            return Err(Error::Shape(format!(
                "validation width {vd} differs from train width {d_in}"
            )));
        }
    }
    if cfg.target_index >= d_in {
        return Err(Error::Config(format!(
            "target index {} out of {d_in} features",
            cfg.target_index
        )));
    }

    let stats = normalize_fit(train)?;
    let train_n = normalize_apply(&stats, train, cfg.target_index)?;
    let val_n = if val.is_empty() {
        Vec::new()
    } else {
        normalize_apply(&stats, val, cfg.target_index)?
    };

    let root = SeedRng::new(cfg.seed);
    let mut model = VisionaryModel::init(cfg, d_in, stats, &mut root.split(1))?;

    let adam = AdamParams::with_lr(cfg.lr);
    adam.validate()?;
    let mut opt: Vec<AdamState> = model.params.iter().map(|t| AdamState::new(t.numel())).collect();

    let mut curve = LearningCurve::default();
    let mut order: Vec<usize> = (0..train_n.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        root.split(2 + epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(&train_n, chunk, cfg.h)?;
            let mut g = Graph::new();
            let (ids, nodes) = model.insert_params(&mut g, true);
            let x_id = g.leaf(x);
            let y_id = g.leaf(y);
            let (pred, _) = forward_nodes(&mut g, x_id, chunk.len(), cfg, &nodes)?;
            let loss = loss_node(&mut g, pred, y_id, cfg.loss)?;
            let loss_value = g.scalar_value(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss_value} at epoch {} batch {batch_idx}",
                    epoch + 1
                )));
            }
            g.backward(loss)?;
            for (pi, id) in ids.iter().enumerate() {
                let grad = g.grad(*id).expect("trainable leaf has a gradient").to_vec();
                adam_step(&adam, &mut opt[pi], model.params[pi].data_mut(), &grad)?;
            }
            epoch_loss += loss_value * chunk.len() as f64;
            seen += chunk.len();
        }

        let train_loss = epoch_loss / seen as f64;
        let val_loss = if val_n.is_empty() { None } else { Some(eval_loss(&model, &val_n)?) };
        curve.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    model.assert_finite()?;
    Ok((model, curve))
}

/// Deterministic forward pass on an already-normalized `[k, d_in]` window.
/// Returns the normalized forecast of length `h`.
pub fn encoder_forward(window: &Tensor, model: &VisionaryModel) -> Result<Vec<f64>> {
    let (k, d) = window.dims2()?;
    if k != model.config.k || d != model.d_in {
        return Err(Error::Contract(format!(
            "window is {k}x{d}, model expects {}x{}",
            model.config.k, model.d_in
        )));
    }
    let mut g = Graph::new();
    let (_, nodes) = model.insert_params(&mut g, false);
    let x_id = g.leaf(window.clone());
    let (pred, _) = forward_nodes(&mut g, x_id, 1, &model.config, &nodes)?;
    Ok(g.value(pred).data().to_vec())
}

/// Forecast in original units: normalize the window with the model's stats,
/// run the encoder, denormalize the target channel.
pub fn predict_horizon(model: &VisionaryModel, window: &Tensor) -> Result<Vec<f64>> {
    let (k, d) = window.dims2()?;
    if d != model.norm_stats.n_features() || d != model.d_in {
        return Err(Error::Contract(format!(
            "window has {d} features, model was fit on {}",
            model.d_in
        )));
    }
    let mut normed = Vec::with_capacity(k * d);
    for r in 0..k {
        for c in 0..d {
            normed.push(model.norm_stats.normalize_value(c, window.at(r, c)));
        }
    }
    let z = encoder_forward(&Tensor::new(vec![k, d], normed)?, model)?;
    Ok(z
        .into_iter()
        .map(|v| model.norm_stats.denormalize_value(model.config.target_index, v))
        .collect())
}

/// End-to-end gradient verification for a forecaster configuration: builds
/// a freshly initialized model (head randomized so gradients reach every
/// layer), one random window, and a random target, then compares every
/// parameter's reverse-mode gradient — and the window's — against central
/// finite differences. Returns the worst relative error.
pub fn verify_gradients(cfg: &VisionaryConfig, d_in: usize, seed: u64) -> Result<f64> {
    cfg.validate()?;
    if d_in == 0 {
        return Err(Error::Config("d_in must be at least 1".into()));
    }
    let mut rng = SeedRng::new(seed);
    let stats = NormStats {
        mean: vec![0.0; d_in],
        std: vec![1.0; d_in],
        constant: vec![false; d_in],
        population: true,
    };
    let mut model = VisionaryModel::init(cfg, d_in, stats, &mut rng)?;
    let n = model.params.len();
    for t in &mut model.params[n - 2..] {
        for v in t.data_mut() {
            *v = rng.range(-0.5, 0.5);
        }
    }
    let window = Tensor::new(
        vec![cfg.k, d_in],
        (0..cfg.k * d_in).map(|_| rng.range(-1.5, 1.5)).collect(),
    )?;
    let target =
        Tensor::new(vec![1, cfg.h], (0..cfg.h).map(|_| rng.range(-1.0, 1.0)).collect())?;

    let mut inputs = vec![window];
    inputs.extend(model.params.iter().cloned());
    let cfg = cfg.clone();
    crate::numcore::grad_check(
        move |g, ids| {
            let nodes = NodeParams::from_ids(&cfg, &ids[1..])?;
            let (pred, _) = forward_nodes(g, ids[0], 1, &cfg, &nodes)?;
            let t = g.leaf(target.clone());
            loss_node(g, pred, t, cfg.loss)
        },
        &inputs,
        1e-5,
    )
}

/// A sequence model that turns a raw-unit window into a raw-unit forecast.
pub trait Forecaster {
    fn window_len(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Forecast from a `[window_len, d_in]` window in original units.
    fn forecast(&self, window: &Tensor) -> Result<Vec<f64>>;
}

impl Forecaster for VisionaryModel {
    fn window_len(&self) -> usize {
        self.config.k
    }

    fn horizon(&self) -> usize {
        self.config.h
    }

    fn forecast(&self, window: &Tensor) -> Result<Vec<f64>> {
        predict_horizon(self, window)
    }
}

pub fn save_visionary(path: &Path, model: &VisionaryModel) -> Result<()> {
    let names = VisionaryModel::param_names(&model.config);
    let mut payload = Vec::new();
    for t in &model.params {
        payload.extend_from_slice(&tensor_blob_bytes(t));
    }
    let header = json!({
        "format": VISIONARY_FORMAT_TAG,
        "config": model.config,
        "norm_stats": model.norm_stats,
        "d_in": model.d_in,
        "params": names,
    });
    write_container(path, &header, &payload)
}

pub fn load_visionary(path: &Path) -> Result<VisionaryModel> {
    let file = read_container(path)?;
    file.expect_tag(VISIONARY_FORMAT_TAG)?;
    let config: VisionaryConfig = serde_json::from_value(
        file.header.get("config").cloned().unwrap_or_default(),
    )
    .map_err(|e| Error::Format(format!("bad forecaster config in model file: {e}")))?;
    config.validate()?;
    let norm_stats: NormStats = serde_json::from_value(
        file.header.get("norm_stats").cloned().unwrap_or_default(),
    )
    .map_err(|e| Error::Format(format!("bad normalization stats in model file: {e}")))?;
    let d_in = file
        .header
        .get("d_in")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("model file is missing d_in".into()))? as usize;
    let listed: Vec<String> = serde_json::from_value(
        file.header.get("params").cloned().unwrap_or_default(),
    )
    .map_err(|e| Error::Format(format!("bad parameter index in model file: {e}")))?;
    let names = VisionaryModel::param_names(&config);
    if listed != names {
        return Err(Error::Format(format!(
            "parameter index does not match the config: expected {} tensors, file lists {}",
            names.len(),
            listed.len()
        )));
    }

    let mut params = Vec::with_capacity(names.len());
    let mut offset = 0usize;
    for name in &names {
        if offset >= file.payload.len() {
            return Err(Error::Format(format!("model payload ends before tensor {name}")));
        }
        let (t, used) = read_tensor_blob(&file.payload[offset..])?;
        offset += used;
        params.push(t);
    }
    if offset != file.payload.len() {
        return Err(Error::Format(format!(
            "model payload has {} trailing bytes",
            file.payload.len() - offset
        )));
    }
    let model = VisionaryModel { config, norm_stats, d_in, params };
    model.assert_finite()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    fn tiny_stats(d: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            constant: vec![false; d],
            population: true,
        }
    }

    fn random_window(rng: &mut SeedRng, k: usize, d: usize) -> Tensor {
        Tensor::new(vec![k, d], (0..k * d).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
    }

    /// Samples whose target is a noiseless linear blend of the last window
    /// row, so a small model can drive the loss to ~0.
    fn toy_samples(n: usize, k: usize, d: usize, h: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = SeedRng::new(seed);
        (0..n)
            .map(|i| {
                let window = random_window(&mut rng, k, d);
                let last = window.row2(k - 1).unwrap().to_vec();
                let target: Vec<f64> = (0..h)
                    .map(|j| {
                        let mix: f64 =
                            last.iter().enumerate().map(|(c, v)| v * (c + 1) as f64).sum();
                        0.5 * mix + 0.1 * j as f64
                    })
                    .collect();
                WindowSample { window, present: vec![0.0; d - 1], target, t_index: i }
            })
            .collect()
    }

    /// The head starts at zero; give it random weights so the encoder
    /// actually shows up in the output.
    fn randomize_head(model: &mut VisionaryModel, rng: &mut SeedRng) {
        let n = model.params.len();
        for v in model.params[n - 2].data_mut() {
            *v = rng.range(-0.5, 0.5);
        }
    }

    fn tiny_config() -> VisionaryConfig {
        VisionaryConfig {
            k: 3,
            h: 1,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            lr: 1e-2,
            batch_size: 8,
            epochs: 10,
            seed: 7,
            target_index: 0,
            loss: LossKind::Mse,
        }
    }

    #[test]
    fn config_validation_names_every_offender() {
        let cfg = VisionaryConfig {
            k: 0,
            d_model: 7,
            n_heads: 3,
            lr: -1.0,
            epochs: 0,
            ..VisionaryConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        for field in ["k", "d_model", "n_heads", "lr", "epochs"] {
            assert!(msg.contains(field), "missing {field} in: {msg}");
        }
        assert!(VisionaryConfig::default().validate().is_ok());
    }

    #[test]
    fn positional_encoding_known_values() {
        let pe = positional_encoding(7, 64).unwrap();
        assert_eq!(pe.shape(), &[7, 64]);
        // Position 0: sin 0 = 0 in even columns, cos 0 = 1 in odd columns.
        for c in 0..64 {
            let want = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.at(0, c), want, "column {c}");
        }
        // Position 1, first pair is (sin 1, cos 1).
        assert!((pe.at(1, 0) - 0.8415).abs() < 1e-4, "{}", pe.at(1, 0));
        assert!((pe.at(1, 1) - 0.5403).abs() < 1e-4, "{}", pe.at(1, 1));
        assert!(matches!(positional_encoding(3, 5), Err(Error::Config(_))));
    }

    fn identity_attention(g: &mut Graph, d: usize, n_heads: usize, zero_qk: bool) -> AttentionParams {
        let zero = Tensor::zeros(vec![d, d]);
        let eye = Tensor::identity(d);
        AttentionParams {
            wq: g.leaf(if zero_qk { zero.clone() } else { eye.clone() }),
            wk: g.leaf(if zero_qk { zero } else { eye.clone() }),
            wv: g.leaf(eye.clone()),
            wo: g.leaf(eye),
            n_heads,
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = SeedRng::new(11);
        let mut g = Graph::new();
        let x = g.leaf(random_window(&mut rng, 5, 8));
        let wq = g.leaf(random_window(&mut rng, 8, 8));
        let wk = g.leaf(random_window(&mut rng, 8, 8));
        let wv = g.leaf(random_window(&mut rng, 8, 8));
        let wo = g.leaf(random_window(&mut rng, 8, 8));
        let params = AttentionParams { wq, wk, wv, wo, n_heads: 2 };
        let (out, weights) = multi_head_attention(&mut g, x, &params).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 8]);
        assert_eq!(weights.len(), 2);
        for w in weights {
            let t = g.value(w);
            let (r, c) = t.dims2().unwrap();
            assert_eq!((r, c), (5, 5));
            for i in 0..r {
                let mut sum = 0.0;
                for j in 0..c {
                    let v = t.at(i, j);
                    assert!(v >= 0.0, "negative weight {v}");
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn equal_queries_average_the_value_rows() {
        // Zero q/k projections make every score 0, so softmax is uniform and
        // each output row is the mean of the value rows. Identity wv/wo keep
        // the values equal to the input.
        let mut rng = SeedRng::new(12);
        let x = random_window(&mut rng, 4, 6);
        let mut g = Graph::new();
        let x_id = g.leaf(x.clone());
        let params = identity_attention(&mut g, 6, 2, true);
        let (out, weights) = multi_head_attention(&mut g, x_id, &params).unwrap();
        for w in weights {
            let t = g.value(w);
            for v in t.data() {
                assert!((v - 0.25).abs() < 1e-12, "weight {v} is not uniform");
            }
        }
        let got = g.value(out);
        for c in 0..6 {
            let mean: f64 = (0..4).map(|r| x.at(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((got.at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_attention_weight_is_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let wq = g.leaf(Tensor::identity(2));
        let wk = g.leaf(Tensor::identity(2));
        let wv = g.leaf(Tensor::identity(2));
        let wo = g.leaf(Tensor::identity(2));
        let params = AttentionParams { wq, wk, wv, wo, n_heads: 1 };
        let (_, weights) = multi_head_attention(&mut g, x, &params).unwrap();
        assert_eq!(weights.len(), 1);
        assert_eq!(g.value(weights[0]).data(), &[1.0]);
    }

    #[test]
    fn two_step_scalar_case_matches_hand_oracle() {
        // d_model 1, single head: every projection is a scalar multiply, so
        // the whole block reduces to scalar arithmetic.
        let (x1, x2) = (0.3, -0.7);
        let (a, b, c, d) = (1.1, 0.9, 1.3, 0.7);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 1, vec![x1, x2]).unwrap());
        let wq = g.leaf(Tensor::scalar(a));
        let wk = g.leaf(Tensor::scalar(b));
        let wv = g.leaf(Tensor::scalar(c));
        let wo = g.leaf(Tensor::scalar(d));
        let params = AttentionParams { wq, wk, wv, wo, n_heads: 1 };
        let (out, _) = multi_head_attention(&mut g, x, &params).unwrap();

        // scale = 1/sqrt(1) = 1; score[i][j] = (a x_i)(b x_j).
        let mut want = [0.0f64; 2];
        for (i, xi) in [x1, x2].iter().enumerate() {
            let s1 = a * xi * b * x1;
            let s2 = a * xi * b * x2;
            let m = s1.max(s2);
            let (e1, e2) = ((s1 - m).exp(), (s2 - m).exp());
            let z = e1 + e2;
            want[i] = (e1 / z * c * x1 + e2 / z * c * x2) * d;
        }
        let got = g.value(out);
        assert!((got.at(0, 0) - want[0]).abs() < 1e-12);
        assert!((got.at(1, 0) - want[1]).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_zero_head_give_zero_forecast() {
        let cfg = VisionaryConfig { h: 3, ..tiny_config() };
        let mut rng = SeedRng::new(20);
        let mut model = VisionaryModel::init(&cfg, 2, tiny_stats(2), &mut rng).unwrap();
        let window = random_window(&mut rng, cfg.k, 2);
        let out = encoder_forward(&window, &model).unwrap();
        assert_eq!(out.len(), 3);

        // Zeroing the head makes the forecast exactly zero regardless of the
        // encoder output.
        let n = model.params.len();
        for t in &mut model.params[n - 2..] {
            t.data_mut().fill(0.0);
        }
        let zero_window = Tensor::zeros(vec![cfg.k, 2]);
        assert_eq!(encoder_forward(&zero_window, &model).unwrap(), vec![0.0; 3]);

        let bad = Tensor::zeros(vec![cfg.k + 1, 2]);
        assert!(matches!(encoder_forward(&bad, &model), Err(Error::Contract(_))));
    }

    #[test]
    fn permuting_window_rows_changes_the_output() {
        let cfg = tiny_config();
        let mut rng = SeedRng::new(21);
        let mut model = VisionaryModel::init(&cfg, 2, tiny_stats(2), &mut rng).unwrap();
        randomize_head(&mut model, &mut rng);
        let window = random_window(&mut rng, 3, 2);
        let mut swapped_rows = Vec::new();
        for r in [1usize, 0, 2] {
            swapped_rows.extend_from_slice(window.row2(r).unwrap());
        }
        let swapped = Tensor::new(vec![3, 2], swapped_rows).unwrap();
        let a = encoder_forward(&window, &model).unwrap();
        let b = encoder_forward(&swapped, &model).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "permutation left the forecast unchanged");
    }

    #[test]
    fn end_to_end_gradients_pass_grad_check() {
        let cfg = VisionaryConfig {
            k: 3,
            h: 2,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            d_ff: 6,
            ..tiny_config()
        };
        let mut rng = SeedRng::new(22);
        let mut model = VisionaryModel::init(&cfg, 2, tiny_stats(2), &mut rng).unwrap();
        randomize_head(&mut model, &mut rng);
        let window = random_window(&mut rng, 3, 2);
        let target = Tensor::matrix(1, 2, vec![0.4, -0.2]).unwrap();

        let mut inputs = vec![window];
        inputs.extend(model.params.iter().cloned());
        let cfg2 = cfg.clone();
        let err = grad_check(
            move |g, ids| {
                let nodes = NodeParams::from_ids(&cfg2, &ids[1..])?;
                let (pred, _) = forward_nodes(g, ids[0], 1, &cfg2, &nodes)?;
                let t = g.leaf(target.clone());
                loss_node(g, pred, t, LossKind::Mse)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "worst relative gradient error {err}");
    }

    #[test]
    fn memorizes_a_small_set() {
        let cfg = VisionaryConfig { epochs: 500, ..tiny_config() };
        let samples = toy_samples(8, cfg.k, 2, cfg.h, 30);
        let (model, curve) = train_visionary(&samples, &[], &cfg).unwrap();
        assert_eq!(curve.epochs.len(), 500);
        // Normalized train MSE after convergence.
        let stats = model.norm_stats.clone();
        let mut sq = 0.0;
        for s in &samples {
            let pred = predict_horizon(&model, &s.window).unwrap();
            for (p, y) in pred.iter().zip(&s.target) {
                let zp = stats.normalize_value(cfg.target_index, *p);
                let zy = stats.normalize_value(cfg.target_index, *y);
                sq += (zp - zy) * (zp - zy);
            }
        }
        let mse = sq / samples.len() as f64;
        assert!(mse < 1e-3, "train MSE {mse}");
    }

    #[test]
    fn first_epoch_loss_is_near_target_variance() {
        let cfg = VisionaryConfig { epochs: 1, batch_size: 32, lr: 1e-3, ..tiny_config() };
        let samples = toy_samples(200, cfg.k, 2, cfg.h, 31);
        let (model, curve) = train_visionary(&samples, &[], &cfg).unwrap();
        // Variance of the normalized targets, from the model's own stats.
        let stats = &model.norm_stats;
        let zs: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.target.iter().map(|y| stats.normalize_value(cfg.target_index, *y)))
            .collect();
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / zs.len() as f64;
        let first = curve.epochs[0].train_loss;
        assert!(first < 3.0 * var && first > var / 3.0, "epoch-1 loss {first} vs variance {var}");
    }

    #[test]
    fn best_so_far_loss_is_non_increasing_and_improves() {
        let cfg = VisionaryConfig { epochs: 40, ..tiny_config() };
        let samples = toy_samples(16, cfg.k, 2, cfg.h, 32);
        let (_, curve) = train_visionary(&samples, &[], &cfg).unwrap();
        let mut best = f64::INFINITY;
        let mut bests = Vec::new();
        for e in &curve.epochs {
            best = best.min(e.train_loss);
            bests.push(best);
        }
        for w in bests.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(
            bests.last().unwrap() < &(curve.epochs[0].train_loss * 0.5),
            "training never improved: first {} best {}",
            curve.epochs[0].train_loss,
            bests.last().unwrap()
        );
    }

    #[test]
    fn same_seed_gives_identical_curves_and_predictions() {
        let cfg = VisionaryConfig { epochs: 5, ..tiny_config() };
        let samples = toy_samples(20, cfg.k, 2, cfg.h, 33);
        let (val, train) = samples.split_at(4);
        let (m1, c1) = train_visionary(train, val, &cfg).unwrap();
        let (m2, c2) = train_visionary(train, val, &cfg).unwrap();
        assert_eq!(c1.epochs.len(), c2.epochs.len());
        for (a, b) in c1.epochs.iter().zip(&c2.epochs) {
            // Everything except wall time must match bitwise.
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(
                a.val_loss.map(f64::to_bits),
                b.val_loss.map(f64::to_bits)
            );
        }
        assert_eq!(m1.params, m2.params);
        let w = &samples[0].window;
        assert_eq!(predict_horizon(&m1, w).unwrap(), predict_horizon(&m2, w).unwrap());
        // Repeated prediction is pure.
        assert_eq!(predict_horizon(&m1, w).unwrap(), predict_horizon(&m1, w).unwrap());
    }

    #[test]
    fn empty_train_set_and_divergence_are_reported() {
        let cfg = tiny_config();
        assert!(matches!(train_visionary(&[], &[], &cfg), Err(Error::Data(_))));

        let diverge = VisionaryConfig { lr: 1e200, epochs: 3, ..tiny_config() };
        let samples = toy_samples(8, diverge.k, 2, diverge.h, 34);
        let err = train_visionary(&samples, &[], &diverge).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected a numeric error, got {other}"),
        }
    }

    #[test]
    fn beats_persistence_on_a_sine_wave() {
        // Noiseless sine, single feature. Persistence forecasts the last
        // observed value; the model must do strictly better on held-out data.
        let k = 8;
        let series: Vec<f64> = (0..360).map(|t| (t as f64 * 0.25).sin()).collect();
        let mut samples = Vec::new();
        for t in k..series.len() {
            let window = Tensor::new(vec![k, 1], series[t - k..t].to_vec()).unwrap();
            samples.push(WindowSample {
                window,
                present: vec![],
                target: vec![series[t]],
                t_index: t,
            });
        }
        let split = samples.len() - 60;
        let (train, test) = samples.split_at(split);
        let cfg = VisionaryConfig {
            k,
            h: 1,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            lr: 3e-3,
            batch_size: 32,
            epochs: 120,
            seed: 5,
            target_index: 0,
            loss: LossKind::Mse,
        };
        let (model, _) = train_visionary(train, &[], &cfg).unwrap();

        let mut model_sq = 0.0;
        let mut persist_sq = 0.0;
        for s in test {
            let pred = predict_horizon(&model, &s.window).unwrap();
            assert_eq!(pred.len(), 1);
            let last = s.window.at(k - 1, 0);
            model_sq += (pred[0] - s.target[0]).powi(2);
            persist_sq += (last - s.target[0]).powi(2);
        }
        let model_rmse = (model_sq / test.len() as f64).sqrt();
        let persist_rmse = (persist_sq / test.len() as f64).sqrt();
        assert!(
            model_rmse < persist_rmse,
            "model RMSE {model_rmse} did not beat persistence {persist_rmse}"
        );

        // Normalize/denormalize of the target channel is an exact affine
        // round trip.
        let y = 0.73;
        let z = model.norm_stats.normalize_value(0, y);
        assert!((model.norm_stats.denormalize_value(0, z) - y).abs() < 1e-12);
    }

    #[test]
    fn mae_loss_also_trains() {
        let cfg = VisionaryConfig { loss: LossKind::Mae, epochs: 5, ..tiny_config() };
        let samples = toy_samples(12, cfg.k, 2, cfg.h, 36);
        let (_, curve) = train_visionary(&samples, &[], &cfg).unwrap();
        assert!(curve.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn model_file_round_trips_bitwise() {
        let cfg = VisionaryConfig { epochs: 3, ..tiny_config() };
        let samples = toy_samples(10, cfg.k, 2, cfg.h, 35);
        let (model, _) = train_visionary(&samples, &[], &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("visionary.bttf");
        save_visionary(&path, &model).unwrap();
        let loaded = load_visionary(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.d_in, model.d_in);
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.shape(), b.shape());
            let bits_equal = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "parameter payload drifted");
        }
        let w = &samples[0].window;
        assert_eq!(predict_horizon(&model, w).unwrap(), predict_horizon(&loaded, w).unwrap());

        // A wrong tag is rejected before any payload parsing.
        let other = dir.path().join("other.bttf");
        write_container(&other, &json!({"format": "bttf-gbt-v1"}), &[]).unwrap();
        assert!(matches!(load_visionary(&other), Err(Error::Format(_))));
    }
}
