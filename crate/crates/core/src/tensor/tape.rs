//! Reverse-mode autodiff on a linear tape.
//!
//! A `Tape` records every op during the forward pass; `backward` replays the
//! tape in reverse, accumulating gradients. Tapes are single-owner: one tape
//! per worker, parameters enter as value snapshots via [`Tape::param`].

use super::{Result, Tensor, TensorError};

pub type VarId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter storage. Indices are stable once added, which is what
/// tapes and optimizer state key on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Zero tensors shape-matched to every parameter, for gradient accumulation.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(&t.shape)).collect()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul { a: VarId, b: VarId },
    Transpose { a: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    AddBias { a: VarId, bias: VarId },
    Scale { a: VarId, c: f64 },
    AddScalar { a: VarId },
    Relu { a: VarId },
    Sigmoid { a: VarId },
    Tanh { a: VarId },
    Softmax { a: VarId },
    LayerNorm { a: VarId, gain: VarId, bias: VarId },
    Gather { table: VarId, indices: Vec<usize> },
    Reshape { a: VarId },
    SliceCols { a: VarId, start: usize },
    ConcatCols { parts: Vec<VarId> },
    Sum { a: VarId },
    CrossEntropy { logits: VarId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Linear Wengert tape. Deterministic: identical op sequences produce
/// bitwise-identical gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Constant input; receives no harvested gradient.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Snapshot of parameter `idx`; its gradient is harvested after backward.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> VarId {
        self.push(params.get(idx).clone(), Op::Leaf { param: Some(idx) })
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(
            &self.nodes[a].value.data,
            &self.nodes[b].value.data,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let t = &self.nodes[a].value;
        assert_eq!(t.shape.len(), 2, "transpose expects a 2-D tensor");
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::Transpose { a })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        a: VarId,
        b: VarId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape, tb.shape, "{name}: shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), op)
    }

    /// Broadcast-add `bias` ([d]) to every row of `a` ([..., d]).
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[bias].value);
        let d = ta.last_dim();
        assert_eq!(tb.shape, vec![d], "add_bias: bias must be [last_dim]");
        let mut data = ta.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data[i % d];
        }
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x + c).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x.tanh()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::Tanh { a })
    }

    /// Row-wise softmax along the last axis, max-subtracted for stability.
    /// Entries pushed to -1e30 by an additive mask come out exactly 0.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a].value;
        if !ta.all_finite() {
            return Err(TensorError::NonFinite {
                context: "softmax input".into(),
            });
        }
        let d = ta.last_dim();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = ta.shape.clone();
        Ok(self.push(Tensor::new(shape, data), Op::Softmax { a }))
    }

    /// Per-row layer normalization along the last axis with affine
    /// gain/bias ([d] each). Variance epsilon is 1e-5.
    pub fn layer_norm(&mut self, a: VarId, gain: VarId, bias: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let d = ta.last_dim();
        assert_eq!(self.nodes[gain].value.shape, vec![d]);
        assert_eq!(self.nodes[bias].value.shape, vec![d]);
        let g = &self.nodes[gain].value.data;
        let b = &self.nodes[bias].value.data;
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mu) * inv) + b[j];
            }
        }
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::LayerNorm { a, gain, bias })
    }

    /// Row lookup: out[i] = table[indices[i]], out is [len, d].
    pub fn gather(&mut self, table: VarId, indices: Vec<usize>) -> Result<VarId> {
        let tt = &self.nodes[table].value;
        assert_eq!(tt.shape.len(), 2, "gather expects a 2-D table");
        let (rows, d) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in &indices {
            if ix >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: ix,
                    bound: rows,
                });
            }
            data.extend_from_slice(&tt.data[ix * d..(ix + 1) * d]);
        }
        let n = indices.len();
        Ok(self.push(
            Tensor::new(vec![n, d], data),
            Op::Gather { table, indices },
        ))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let ta = &self.nodes[a].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.numel(),
            "reshape: element count mismatch"
        );
        let data = ta.data.clone();
        self.push(Tensor::new(shape, data), Op::Reshape { a })
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let ta = &self.nodes[a].value;
        assert_eq!(ta.shape.len(), 2);
        let (m, n) = (ta.shape[0], ta.shape[1]);
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.data[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { a, start })
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0]].value.shape[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = &self.nodes[p].value.shape;
                assert_eq!(s.len(), 2);
                assert_eq!(s[0], m, "concat_cols: row count mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let t = &self.nodes[p].value;
                data.extend_from_slice(&t.data[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![m, total], data),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over unmasked rows of -log softmax(logits_h)[target_h].
    /// `mask[h] == false` excludes row h from the mean (short hands).
    pub fn cross_entropy(
        &mut self,
        logits: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId> {
        let tl = &self.nodes[logits].value;
        assert_eq!(tl.shape.len(), 2, "cross_entropy expects [H, C] logits");
        let (h, c) = (tl.shape[0], tl.shape[1]);
        assert_eq!(targets.len(), h);
        assert_eq!(mask.len(), h);
        let mut total = 0.0;
        let mut active = 0usize;
        for (row, (&t, &m)) in tl.data.chunks(c).zip(targets.iter().zip(mask.iter())) {
            if !m {
                continue;
            }
            if t >= c {
                return Err(TensorError::IndexOutOfRange { index: t, bound: c });
            }
            total += log_sum_exp(row) - row[t];
            active += 1;
        }
        if active == 0 {
            return Err(TensorError::Contract(
                "cross_entropy: no unmasked rows".into(),
            ));
        }
        Ok(self.push(
            Tensor::scalar(total / active as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients;
    /// use [`Tape::accumulate_param_grads`] to harvest parameter gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        grads[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.backprop_node(id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: VarId, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G B^T, dB = A^T G
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * tb.data[p * n + j];
                        }
                        grads[*a][i * k + p] += s;
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ta.data[i * k + p] * g[i * n + j];
                        }
                        grads[*b][p * n + j] += s;
                    }
                }
            }
            Op::Transpose { a } => {
                let ta = &self.nodes[*a].value;
                let (m, n) = (ta.shape[0], ta.shape[1]);
                for i in 0..m {
                    for j in 0..n {
                        grads[*a][i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add { a, b } => {
                for (ga, gi) in grads[*a].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, gi) in grads[*b].iter_mut().zip(g) {
                    *gb += gi;
                }
            }
            Op::Sub { a, b } => {
                for (ga, gi) in grads[*a].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, gi) in grads[*b].iter_mut().zip(g) {
                    *gb -= gi;
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                for (i, gi) in g.iter().enumerate() {
                    grads[*a][i] += gi * vb[i];
                    grads[*b][i] += gi * va[i];
                }
            }
            Op::AddBias { a, bias } => {
                let d = self.nodes[*bias].value.numel();
                for (i, gi) in g.iter().enumerate() {
                    grads[*a][i] += gi;
                    grads[*bias][i % d] += gi;
                }
            }
            Op::Scale { a, c } => {
                for (ga, gi) in grads[*a].iter_mut().zip(g) {
                    *ga += gi * c;
                }
            }
            Op::AddScalar { a } => {
                for (ga, gi) in grads[*a].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::Relu { a } => {
                let va = &self.nodes[*a].value.data;
                for (i, gi) in g.iter().enumerate() {
                    if va[i] > 0.0 {
                        grads[*a][i] += gi;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = &node.value.data;
                for (i, gi) in g.iter().enumerate() {
                    grads[*a][i] += gi * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh { a } => {
                let y = &node.value.data;
                for (i, gi) in g.iter().enumerate() {
                    grads[*a][i] += gi * (1.0 - y[i] * y[i]);
                }
            }
            Op::Softmax { a } => {
                let y = &node.value.data;
                let d = node.value.last_dim();
                for (r, (grow, yrow)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..d {
                        grads[*a][r * d + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let x = &self.nodes[*a].value.data;
                let gn = &self.nodes[*gain].value.data;
                let d = node.value.last_dim();
                let nf = d as f64;
                for (r, (grow, xrow)) in g.chunks(d).zip(x.chunks(d)).enumerate() {
                    let (mu, var) = mean_var(xrow);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // dxhat and its row statistics
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .enumerate()
                        .map(|(j, &gi)| gi * gn[j])
                        .collect();
                    for j in 0..d {
                        sum_dxh += dxhat[j];
                        sum_dxh_xh += dxhat[j] * xhat[j];
                        grads[*gain][j] += grow[j] * xhat[j];
                        grads[*bias][j] += grow[j];
                    }
                    for j in 0..d {
                        grads[*a][r * d + j] +=
                            inv * (dxhat[j] - sum_dxh / nf - xhat[j] * sum_dxh_xh / nf);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = node.value.last_dim();
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        grads[*table][ix * d + j] += g[i * d + j];
                    }
                }
            }
            Op::Reshape { a } => {
                for (ga, gi) in grads[*a].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::SliceCols { a, start } => {
                let n = self.nodes[*a].value.shape[1];
                let len = node.value.shape[1];
                let m = node.value.shape[0];
                for i in 0..m {
                    for j in 0..len {
                        grads[*a][i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape[1];
                let m = node.value.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape[1];
                    for i in 0..m {
                        for j in 0..w {
                            grads[p][i * w + j] += g[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum { a } => {
                for ga in grads[*a].iter_mut() {
                    *ga += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let tl = &self.nodes[*logits].value;
                let c = tl.shape[1];
                let active = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g[0] / active;
                for (h, row) in tl.data.chunks(c).enumerate() {
                    if !mask[h] {
                        continue;
                    }
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let ind = if j == targets[h] { 1.0 } else { 0.0 };
                        grads[*logits][h * c + j] += scale * (p - ind);
                    }
                }
            }
        }
    }

    /// Add this tape's parameter-leaf gradients into `out`, which must be
    /// shape-matched to the `ParamSet` the leaves came from (see
    /// [`ParamSet::zero_grads`]).
    pub fn accumulate_param_grads(&self, gradients: &Gradients, out: &mut [Tensor]) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                let dst = &mut out[p];
                assert_eq!(dst.numel(), gradients.grads[id].len());
                for (o, g) in dst.data.iter_mut().zip(&gradients.grads[id]) {
                    *o += g;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradient buffers from one backward sweep.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, id: VarId) -> &[f64] {
        &self.grads[id]
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}
