use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on the tape. Ids are tape positions, so every node's
/// inputs have smaller ids than the node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// [r, c] plus a [1, c] row broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Ln(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    tensor: Tensor,
}

/// Eager reverse-mode tape over 2-D f64 tensors.
///
/// Each op computes its value when the node is created, so the node order is
/// a topological order by construction and `backward` is a single reverse
/// sweep. Gradient accumulation is sequential and index-ordered, which makes
/// repeated backward passes of the same tape bitwise identical.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Gradients flow into it only when the
    /// tensor was marked with `with_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let t = self.value(id);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, op: Op, mut tensor: Tensor) -> NodeId {
        let requires = match &op {
            Op::Leaf => tensor.requires_grad(),
            _ => self.op_inputs(&op).iter().any(|id| self.nodes[id.0].tensor.requires_grad()),
        };
        tensor.set_requires_grad(requires);
        self.nodes.push(Node { op, tensor });
        NodeId(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Ln(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols { x: a, .. }
            | Op::SliceRows { x: a, .. }
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(ids) | Op::ConcatRows(ids) => ids.clone(),
        }
    }

    fn dims(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].tensor.dims2()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a)?;
        let (n2, p) = self.dims(b)?;
        if n != n2 {
            return Err(Error::Shape(format!("matmul: [{m}, {n}] x [{n2}, {p}]")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for k in 0..n {
                let aik = av[i * n + k];
                let brow = &bv[k * p..(k + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += aik * brow[j];
                }
            }
        }
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, p], out)?))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.elementwise2("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    /// Broadcast a [1, c] row over every row of a [r, c] matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let (rr, rc) = self.dims(row)?;
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!(
                "add_row: [{r}, {c}] + [{rr}, {rc}], expected row [1, {c}]"
            )));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] + rv[j];
            }
        }
        Ok(self.push(Op::AddRow(a, row), Tensor::new(vec![r, c], out)?))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.elementwise2("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.elementwise2("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let t = self.map_unary(a, |x| x * factor)?;
        Ok(self.push(Op::Scale(a, factor), t))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, |x| if x > 0.0 { x } else { 0.0 })?;
        Ok(self.push(Op::Relu(a), t))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map_unary(a, f64::abs)?;
        Ok(self.push(Op::Abs(a), t))
    }

    /// Natural log; the domain is checked eagerly so a bad value fails at
    /// the op that introduced it rather than as a NaN loss later.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(format!("ln of non-positive value {bad}")));
        }
        let t = self.map_unary(a, f64::ln)?;
        Ok(self.push(Op::Ln(a), t))
    }

    /// Row-wise softmax with max subtraction, so large logits cannot
    /// overflow the exponential.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        if c == 0 {
            return Err(Error::Shape("softmax_rows: zero-width matrix".into()));
        }
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for j in 0..c {
                orow[j] /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(a), Tensor::new(vec![r, c], out)?))
    }

    /// Per-row normalization to zero mean and unit variance (population
    /// variance), then an affine [1, c] gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        let (gr, gc) = self.dims(gain)?;
        let (br, bc) = self.dims(bias)?;
        if gr != 1 || gc != c || br != 1 || bc != c {
            return Err(Error::Shape(format!(
                "layer_norm_rows: x [{r}, {c}], gain [{gr}, {gc}], bias [{br}, {bc}]"
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row, eps);
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        Ok(self.push(Op::LayerNormRows { x, gain, bias, eps }, Tensor::new(vec![r, c], out)?))
    }

    /// Columns [start, start + width) as a new matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        if width == 0 || start + width > c {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of {c} columns",
                start + width
            )));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        Ok(self.push(Op::SliceCols { x, start }, Tensor::new(vec![r, width], out)?))
    }

    /// Rows [start, start + count) as a new matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        if count == 0 || start + count > r {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + count
            )));
        }
        let xv = self.value(x).data();
        let out = xv[start * c..(start + count) * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, Tensor::new(vec![count, c], out)?))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let (r, _) = self.dims(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({r} vs {pr})"
                )));
            }
            widths.push(pc);
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![r, total], out)?))
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let (_, c) = self.dims(parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts differ ({c} vs {pc})"
                )));
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(vec![total, c], out)?))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.dims(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.dims(a)?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Shape("mean_all: empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s / n as f64)))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    /// Reverse sweep from a scalar loss. Every node that requires a gradient
    /// ends up with one; leaves the loss does not reach get explicit zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let t = &self.nodes[loss.0].tensor;
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        if !t.data()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", t.data()[0])));
        }
        self.nodes[loss.0].tensor.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].tensor.grad().is_none() || !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            let gout = self.nodes[i].tensor.grad().unwrap().to_vec();
            let op = self.nodes[i].op.clone();
            self.propagate(&op, NodeId(i), &gout)?;
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad() {
                node.tensor.ensure_grad_buffer();
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        self.nodes[id.0].tensor.accumulate_grad(delta);
    }

    fn propagate(&mut self, op: &Op, out: NodeId, gout: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, n) = self.dims(a)?;
                let (_, p) = self.dims(b)?;
                if self.needs(a) {
                    let bv = self.value(b).data();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..p {
                            let g = gout[i * p + j];
                            let brow = &bv[j..];
                            let darow = &mut da[i * n..(i + 1) * n];
                            for k in 0..n {
                                darow[k] += g * brow[k * p];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    let mut db = vec![0.0; n * p];
                    for i in 0..m {
                        for k in 0..n {
                            let aik = av[i * n + k];
                            let grow = &gout[i * p..(i + 1) * p];
                            let dbrow = &mut db[k * p..(k + 1) * p];
                            for j in 0..p {
                                dbrow[j] += aik * grow[j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.needs(a) {
                    let (r, c) = self.dims(a)?;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = gout[j * r + i];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, gout);
                }
                if self.needs(b) {
                    self.accumulate(b, gout);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(a) {
                    self.accumulate(a, gout);
                }
                if self.needs(row) {
                    let (r, c) = self.dims(a)?;
                    let mut drow = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            drow[j] += gout[i * c + j];
                        }
                    }
                    self.accumulate(row, &drow);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, gout);
                }
                if self.needs(b) {
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.value(b).data();
                    let da: Vec<f64> = gout.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    let db: Vec<f64> = gout.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(a) {
                    let da: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    let xv = self.value(a).data();
                    // Zero subgradient at the kink.
                    let da: Vec<f64> =
                        gout.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Abs(a) => {
                if self.needs(a) {
                    let xv = self.value(a).data();
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Ln(a) => {
                if self.needs(a) {
                    let xv = self.value(a).data();
                    let da: Vec<f64> = gout.iter().zip(xv).map(|(g, x)| g / x).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(a) {
                    let (r, c) = self.dims(out)?;
                    let yv = self.value(out).data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let g = &gout[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                        let darow = &mut da[i * c..(i + 1) * c];
                        for j in 0..c {
                            darow[j] = y[j] * (g[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (r, c) = self.dims(x)?;
                let xv = self.value(x).data().to_vec();
                let gv = self.value(gain).data().to_vec();
                let mut dx = if self.needs(x) { Some(vec![0.0; r * c]) } else { None };
                let mut dgain = if self.needs(gain) { Some(vec![0.0; c]) } else { None };
                let mut dbias = if self.needs(bias) { Some(vec![0.0; c]) } else { None };
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let g = &gout[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_moments(row, eps);
                    if let Some(db) = dbias.as_deref_mut() {
                        for j in 0..c {
                            db[j] += g[j];
                        }
                    }
                    if let Some(dg) = dgain.as_deref_mut() {
                        for j in 0..c {
                            dg[j] += g[j] * (row[j] - mean) * inv_std;
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        // dxhat = g * gain; dx = inv_std * (dxhat - mean(dxhat)
                        //         - xhat * mean(dxhat * xhat))
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv_std;
                            let dxh = g[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let m1 = sum_dxh / c as f64;
                        let m2 = sum_dxh_xh / c as f64;
                        let drow = &mut dx[i * c..(i + 1) * c];
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv_std;
                            drow[j] = inv_std * (g[j] * gv[j] - m1 - xh * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(x, &dx);
                }
                if let Some(dg) = dgain {
                    self.accumulate(gain, &dg);
                }
                if let Some(db) = dbias {
                    self.accumulate(bias, &db);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let (r, c) = self.dims(x)?;
                    let (_, w) = self.dims(out)?;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + w]
                            .copy_from_slice(&gout[i * w..(i + 1) * w]);
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(x) {
                    let (r, c) = self.dims(x)?;
                    let (count, _) = self.dims(out)?;
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..(start + count) * c].copy_from_slice(gout);
                    self.accumulate(x, &dx);
                }
            }
            Op::ConcatCols(ref parts) => {
                let (r, total) = self.dims(out)?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.dims(p)?;
                    if self.needs(p) {
                        let mut dp = vec![0.0; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&gout[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let (_, c) = self.dims(out)?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.dims(p)?;
                    if self.needs(p) {
                        self.accumulate(p, &gout[offset * c..(offset + pr) * c]);
                    }
                    offset += pr;
                }
            }
            Op::SumAll(a) => {
                if self.needs(a) {
                    let da = vec![gout[0]; self.value(a).numel()];
                    self.accumulate(a, &da);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(a) {
                    let n = self.value(a).numel();
                    let da = vec![gout[0] / n as f64; n];
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }

    fn elementwise2(
        &self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        if (ar, ac) != (br, bc) {
            return Err(Error::Shape(format!("{name}: [{ar}, {ac}] vs [{br}, {bc}]")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(vec![ar, ac], out)
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let (r, c) = self.dims(a)?;
        let out: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        Tensor::new(vec![r, c], out)
    }
}

/// Mean and 1/sqrt(population variance + eps) of a row.
fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
