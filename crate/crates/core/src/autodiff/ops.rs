//! Op constructors (eager forward) and their backward rules.
//!
//! Convention for every constructor: validate shapes, compute the value,
//! record backward context in the `Op`, push the node. Backward rules live
//! in [`backprop`] and accumulate into parent gradients in a fixed order.

use super::{BatchNormState, BnMode, Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::geometry::{self, ChamferMode};
use crate::tensor::Tensor;

impl Graph {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(&av.data, &bv.data, m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose requires rank 2, got {:?}",
                xv.shape
            )));
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let mut out = vec![0.0; r * c];
        transpose_raw(&xv.data, r, c, &mut out);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, op(a, b), needs))
    }

    /// Adds a `[C]` (or `[1, C]`) bias row to every row of `[R, C]` x.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c_ok = match bv.rank() {
            1 => bv.shape[0],
            2 if bv.shape[0] == 1 => bv.shape[1],
            _ => 0,
        };
        if xv.rank() != 2 || xv.shape[1] != c_ok {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.data.chunks_exact(c) {
            out.extend(row.iter().zip(&bv.data).map(|(&v, &b)| v + b));
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddBias { x, bias }, needs))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data.iter().map(|&v| scale * v + shift).collect();
        let shape = xv.shape.clone();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data },
            Op::Affine { x, scale },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = xv.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor { shape, data }, Op::Relu { x }, needs)
    }

    /// Max over consecutive row groups: `[G·group, C]` → `[G, C]`, the
    /// symmetric set aggregation. Ties route the gradient to the lowest row.
    pub fn max_over_set(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 {
            return Err(Error::Contract("max_over_set: empty set axis".into()));
        }
        if xv.rank() != 2 || xv.shape[0] % group != 0 {
            return Err(Error::Contract(format!(
                "max_over_set: rows {:?} not divisible into groups of {group}",
                xv.shape
            )));
        }
        let (rows, c) = (xv.shape[0], xv.shape[1]);
        let groups = rows / group;
        let mut out = vec![0.0; groups * c];
        let mut argmax = vec![0u32; groups * c];
        for gi in 0..groups {
            let base = gi * group;
            out[gi * c..(gi + 1) * c].copy_from_slice(&xv.data[base * c..base * c + c]);
            for j in 0..c {
                argmax[gi * c + j] = base as u32;
            }
            for r in base + 1..base + group {
                let row = &xv.data[r * c..(r + 1) * c];
                let dst = gi * c;
                for j in 0..c {
                    if row[j] > out[dst + j] {
                        out[dst + j] = row[j];
                        argmax[dst + j] = r as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![groups, c], out)?,
            Op::MaxOverSet { x, argmax },
            needs,
        ))
    }

    /// Row-wise `v / max(‖v‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Contract("l2_normalize: eps must be positive".into()));
        }
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Contract(format!(
                "l2_normalize requires rank 2, got {:?}",
                xv.shape
            )));
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            let denom = if norm > eps { norm } else { eps };
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / denom;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::L2Normalize { x, norms, eps },
            needs,
        ))
    }

    /// logΣexp over the last axis with max-shift; exact for singletons.
    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.is_empty() {
            return Err(Error::Contract("log_sum_exp: empty input".into()));
        }
        let c = *xv.shape.last().expect("rank checked");
        let rows = xv.len() / c;
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &xv.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out[i] = m + s.ln();
        }
        let shape = if xv.rank() == 1 {
            vec![1]
        } else {
            xv.shape[..xv.rank() - 1].to_vec()
        };
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp { x }, needs))
    }

    /// Batch normalization over rows of `[R, C]`.
    ///
    /// Train mode computes biased batch statistics, updates the running
    /// statistics in `state` (fraction `state.momentum` of the old value
    /// retained), and differentiates through the batch mean and variance.
    /// Eval mode normalizes by the running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let c = state.channels();
        if xv.rank() != 2 || xv.shape[1] != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape.clone(),
                rhs: vec![c],
            });
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Contract("batch_norm: affine params mismatch state".into()));
        }
        if !(state.momentum > 0.0 && state.momentum <= 1.0) {
            return Err(Error::Contract(format!(
                "batch_norm: momentum {} outside (0,1]",
                state.momentum
            )));
        }
        let r = xv.shape[0];
        if mode == BnMode::Train && r < 2 {
            return Err(Error::Contract(
                "batch_norm: train mode needs at least 2 rows of statistics".into(),
            ));
        }

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for row in xv.data.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= r as f64;
                }
                let mut var = vec![0.0; c];
                for row in xv.data.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                for s in &mut var {
                    *s /= r as f64;
                }
                (mean, var)
            }
            BnMode::Eval => (
                state.running_mean.data.clone(),
                state.running_var.data.clone(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for (i, row) in xv.data.chunks_exact(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }

        if mode == BnMode::Train {
            let mu = state.momentum;
            for (rm, &m) in state.running_mean.data.iter_mut().zip(&mean) {
                *rm = mu * *rm + (1.0 - mu) * m;
            }
            for (rv, &v) in state.running_var.data.iter_mut().zip(&var) {
                *rv = mu * *rv + (1.0 - mu) * v;
            }
        }

        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape[0] != bv.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (r, ca, cb) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av.data[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv.data[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![r, ca + cb], out)?,
            Op::ConcatCols { a, b },
            needs,
        ))
    }

    /// Row gather; duplicate indices are allowed and scatter-add on backward.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Contract("gather_rows requires rank 2".into()));
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv.data[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.iter().map(|&i| i as u32).collect(),
            },
            needs,
        ))
    }

    /// Repeats each row `times` times consecutively: `[R, C]` → `[R·times, C]`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || times == 0 {
            return Err(Error::Contract("repeat_rows: rank-2 input, times ≥ 1".into()));
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r * times, c], out)?,
            Op::RepeatRows { x, times },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || len == 0 || start + len > xv.shape[0] {
            return Err(Error::Contract(format!(
                "slice_rows: [{start}, {start}+{len}) outside {:?}",
                xv.shape
            )));
        }
        let c = xv.shape[1];
        let out = xv.data[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![len, c], out)?,
            Op::SliceRows { x, start },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s: f64 = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, needs)
    }

    /// Chamfer distance between the differentiable point set `x` (`[P, 3]`)
    /// and a fixed target. Nearest-neighbor matches are frozen at forward
    /// time; backward follows the unsquared-L2 subgradient (zero at
    /// coincident points).
    pub fn chamfer_set(
        &mut self,
        x: NodeId,
        target: &[[f64; 3]],
        mode: ChamferMode,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape[1] != 3 {
            return Err(Error::Contract(format!(
                "chamfer_set: expected [P, 3], got {:?}",
                xv.shape
            )));
        }
        let pts = rows3(xv);
        let res = geometry::chamfer(&pts, target, mode)?;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(res.value),
            Op::Chamfer {
                x,
                target: target.to_vec(),
                mode,
                nn_xt: res.nn_ab,
                nn_tx: res.nn_ba,
            },
            needs,
        ))
    }

    /// Per-row multi-class N-pair terms over similarity logits.
    ///
    /// For row r with positive column p: `ln(1 + Σ_{k≠p} exp(s_k − s_p))`,
    /// the −log-softmax of the positive where the denominator includes the
    /// positive itself. Evaluating relative to the positive keeps terms near
    /// zero exact down to ~1e−300 instead of being absorbed into a large
    /// log-sum; a max-shift branch covers logit spreads beyond ±300.
    pub fn npair_terms(&mut self, sims: NodeId, pos: &[usize]) -> Result<NodeId> {
        let sv = self.value(sims);
        if sv.rank() != 2 || sv.shape[0] != pos.len() {
            return Err(Error::Contract(format!(
                "npair_terms: sims {:?} vs {} positives",
                sv.shape,
                pos.len()
            )));
        }
        let (r, m) = (sv.shape[0], sv.shape[1]);
        if let Some(&bad) = pos.iter().find(|&&p| p >= m) {
            return Err(Error::Contract(format!(
                "npair_terms: positive column {bad} out of range {m}"
            )));
        }
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &sv.data[i * m..(i + 1) * m];
            out[i] = npair_row_value(row, pos[i]);
        }
        let needs = self.needs(sims);
        Ok(self.push(
            Tensor::new(vec![r], out)?,
            Op::NPairTerms {
                sims,
                pos: pos.iter().map(|&p| p as u32).collect(),
            },
            needs,
        ))
    }

    /// Mean cosine dissimilarity between predicted and target unit rows:
    /// `1 − mean(cos)` oriented, `1 − mean(|cos|)` unoriented.
    pub fn cosine_set_loss(
        &mut self,
        pred: NodeId,
        target: &[[f64; 3]],
        oriented: bool,
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.rank() != 2 || pv.shape[1] != 3 || pv.shape[0] != target.len() {
            return Err(Error::Contract(format!(
                "cosine_set_loss: pred {:?} vs {} targets",
                pv.shape,
                target.len()
            )));
        }
        let n = target.len();
        for i in 0..n {
            let pn = norm3(pv.row(i));
            let tn = norm3(&target[i]);
            if (pn - 1.0).abs() > 1e-3 || (tn - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "cosine_set_loss: row {i} norms ({pn:.6}, {tn:.6}) not unit"
                )));
            }
        }
        let mut acc = 0.0;
        for (row, t) in pv.data.chunks_exact(3).zip(target) {
            let c = row[0] * t[0] + row[1] * t[1] + row[2] * t[2];
            acc += if oriented { c } else { c.abs() };
        }
        let value = 1.0 - acc / n as f64;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CosineSetLoss {
                pred,
                target: target.to_vec(),
                oriented,
            },
            needs,
        ))
    }
}

/// One N-pair term; see [`Graph::npair_terms`].
fn npair_row_value(row: &[f64], pos: usize) -> f64 {
    let base = row[pos];
    let mut dmax = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if k != pos {
            dmax = dmax.max(v - base);
        }
    }
    if dmax == f64::NEG_INFINITY {
        return 0.0; // singleton batch: softmax over {positive} only
    }
    if dmax <= 300.0 {
        let s: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != pos)
            .map(|(_, &v)| (v - base).exp())
            .sum();
        s.ln_1p()
    } else {
        let t: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != pos)
            .map(|(_, &v)| (v - base - dmax).exp())
            .sum();
        let l = dmax + t.ln();
        // ln(1 + e^L) for large positive L
        l + (-l).exp().ln_1p()
    }
}

fn npair_row_grad(row: &[f64], pos: usize, upstream: f64, out: &mut [f64]) {
    let base = row[pos];
    let mut dmax = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if k != pos {
            dmax = dmax.max(v - base);
        }
    }
    if dmax == f64::NEG_INFINITY {
        return;
    }
    if dmax <= 300.0 {
        let s: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != pos)
            .map(|(_, &v)| (v - base).exp())
            .sum();
        let denom = 1.0 + s;
        for (k, &v) in row.iter().enumerate() {
            if k != pos {
                out[k] += upstream * (v - base).exp() / denom;
            }
        }
        out[pos] -= upstream * s / denom;
    } else {
        let t: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != pos)
            .map(|(_, &v)| (v - base - dmax).exp())
            .sum();
        let denom = (-dmax).exp() + t;
        for (k, &v) in row.iter().enumerate() {
            if k != pos {
                out[k] += upstream * (v - base - dmax).exp() / denom;
            }
        }
        out[pos] -= upstream * t / denom;
    }
}

fn norm3(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// `out += a·b` for row-major `[m,k]·[k,n]`, axpy inner loops (vectorizable,
/// fixed accumulation order). Zero entries of `a` skip a whole row of work,
/// which pays off on post-ReLU activations.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

pub(crate) fn transpose_raw(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Backward dispatch: accumulate `g` (gradient at `out`) into parents.
pub(crate) fn backprop(graph: &mut Graph, out: NodeId, op: &Op, g: &Tensor) -> Result<()> {
    match op {
        Op::Leaf => {}

        Op::Matmul { a, b } => {
            let (m, k) = {
                let av = graph.value(*a);
                (av.shape[0], av.shape[1])
            };
            let n = graph.value(*b).shape[1];
            if graph.needs(*a) {
                // dA = G·Bᵀ via a materialized transpose so the inner loop is axpy.
                let bv = graph.value(*b);
                let mut bt = vec![0.0; k * n];
                transpose_raw(&bv.data, k, n, &mut bt);
                let mut da = vec![0.0; m * k];
                matmul_raw(&g.data, &bt, m, n, k, &mut da);
                graph.accumulate(*a, Tensor::new(vec![m, k], da)?);
            }
            if graph.needs(*b) {
                // dB = Aᵀ·G: axpy over rows of G keyed by entries of A.
                let av = graph.value(*a);
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g.data[i * n..(i + 1) * n];
                    for p in 0..k {
                        let v = av.data[i * k + p];
                        if v != 0.0 {
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += v * gv;
                            }
                        }
                    }
                }
                graph.accumulate(*b, Tensor::new(vec![k, n], db)?);
            }
        }

        Op::Transpose { x } => {
            if graph.needs(*x) {
                let (r, c) = (g.shape[0], g.shape[1]);
                let mut dx = vec![0.0; r * c];
                transpose_raw(&g.data, r, c, &mut dx);
                graph.accumulate(*x, Tensor::new(vec![c, r], dx)?);
            }
        }

        Op::Add { a, b } => {
            if graph.needs(*a) {
                graph.accumulate(*a, g.clone());
            }
            if graph.needs(*b) {
                graph.accumulate(*b, g.clone());
            }
        }

        Op::Sub { a, b } => {
            if graph.needs(*a) {
                graph.accumulate(*a, g.clone());
            }
            if graph.needs(*b) {
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                graph.accumulate(*b, neg);
            }
        }

        Op::Mul { a, b } => {
            if graph.needs(*a) {
                let bv = graph.value(*b);
                let da: Vec<f64> = g.data.iter().zip(&bv.data).map(|(&gv, &v)| gv * v).collect();
                graph.accumulate(*a, Tensor { shape: g.shape.clone(), data: da });
            }
            if graph.needs(*b) {
                let av = graph.value(*a);
                let db: Vec<f64> = g.data.iter().zip(&av.data).map(|(&gv, &v)| gv * v).collect();
                graph.accumulate(*b, Tensor { shape: g.shape.clone(), data: db });
            }
        }

        Op::AddBias { x, bias } => {
            if graph.needs(*x) {
                graph.accumulate(*x, g.clone());
            }
            if graph.needs(*bias) {
                let c = g.shape[1];
                let mut db = vec![0.0; c];
                for row in g.data.chunks_exact(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let shape = graph.value(*bias).shape.clone();
                graph.accumulate(*bias, Tensor::new(shape, db)?);
            }
        }

        Op::Affine { x, scale } => {
            if graph.needs(*x) {
                let dx: Vec<f64> = g.data.iter().map(|&v| v * scale).collect();
                graph.accumulate(*x, Tensor { shape: g.shape.clone(), data: dx });
            }
        }

        Op::Relu { x } => {
            if graph.needs(*x) {
                let xv = graph.value(*x);
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                graph.accumulate(*x, Tensor { shape: g.shape.clone(), data: dx });
            }
        }

        Op::MaxOverSet { x, argmax } => {
            if graph.needs(*x) {
                let shape = graph.value(*x).shape.clone();
                let c = shape[1];
                let mut dx = vec![0.0; shape[0] * c];
                for (oi, (&gv, &src)) in g.data.iter().zip(argmax).enumerate() {
                    dx[src as usize * c + oi % c] += gv;
                }
                graph.accumulate(*x, Tensor::new(shape, dx)?);
            }
        }

        Op::L2Normalize { x, norms, eps } => {
            if graph.needs(*x) {
                let y = &graph.nodes[out.0].value;
                let (r, c) = (y.shape[0], y.shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dr = &mut dx[i * c..(i + 1) * c];
                    if norms[i] > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            dr[j] = gr[j] / eps;
                        }
                    }
                }
                graph.accumulate(*x, Tensor::new(vec![r, c], dx)?);
            }
        }

        Op::LogSumExp { x } => {
            if graph.needs(*x) {
                let xv = graph.value(*x);
                let yv = &graph.nodes[out.0].value;
                let c = *xv.shape.last().expect("rank ≥ 1");
                let rows = xv.len() / c;
                let mut dx = vec![0.0; xv.len()];
                for i in 0..rows {
                    let lse = yv.data[i];
                    let gv = g.data[i];
                    for j in 0..c {
                        dx[i * c + j] = gv * (xv.data[i * c + j] - lse).exp();
                    }
                }
                let shape = xv.shape.clone();
                graph.accumulate(*x, Tensor::new(shape, dx)?);
            }
        }

        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let c = inv_std.len();
            let r = g.shape[0];
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (i, row) in g.data.chunks_exact(c).enumerate() {
                for j in 0..c {
                    sum_g[j] += row[j];
                    sum_gx[j] += row[j] * xhat[i * c + j];
                }
            }
            if graph.needs(*beta) {
                graph.accumulate(*beta, Tensor::new(vec![c], sum_g.clone())?);
            }
            if graph.needs(*gamma) {
                graph.accumulate(*gamma, Tensor::new(vec![c], sum_gx.clone())?);
            }
            if graph.needs(*x) {
                let gv = &graph.value(*gamma).data;
                let mut dx = vec![0.0; r * c];
                if *train {
                    let rf = r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let t = g.data[i * c + j]
                                - sum_g[j] / rf
                                - xhat[i * c + j] * sum_gx[j] / rf;
                            dx[i * c + j] = gv[j] * inv_std[j] * t;
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = gv[j] * inv_std[j] * g.data[i * c + j];
                        }
                    }
                }
                graph.accumulate(*x, Tensor::new(vec![r, c], dx)?);
            }
        }

        Op::ConcatCols { a, b } => {
            let ca = graph.value(*a).shape[1];
            let cb = graph.value(*b).shape[1];
            let r = g.shape[0];
            if graph.needs(*a) {
                let mut da = vec![0.0; r * ca];
                for i in 0..r {
                    da[i * ca..(i + 1) * ca]
                        .copy_from_slice(&g.data[i * (ca + cb)..i * (ca + cb) + ca]);
                }
                graph.accumulate(*a, Tensor::new(vec![r, ca], da)?);
            }
            if graph.needs(*b) {
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    db[i * cb..(i + 1) * cb]
                        .copy_from_slice(&g.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                }
                graph.accumulate(*b, Tensor::new(vec![r, cb], db)?);
            }
        }

        Op::GatherRows { x, idx } => {
            if graph.needs(*x) {
                let shape = graph.value(*x).shape.clone();
                let c = shape[1];
                let mut dx = vec![0.0; shape[0] * c];
                for (i, &src) in idx.iter().enumerate() {
                    let grow = &g.data[i * c..(i + 1) * c];
                    let drow = &mut dx[src as usize * c..(src as usize + 1) * c];
                    for (d, &v) in drow.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                graph.accumulate(*x, Tensor::new(shape, dx)?);
            }
        }

        Op::RepeatRows { x, times } => {
            if graph.needs(*x) {
                let shape = graph.value(*x).shape.clone();
                let (r, c) = (shape[0], shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let drow = &mut dx[i * c..(i + 1) * c];
                    for t in 0..*times {
                        let grow = &g.data[(i * times + t) * c..(i * times + t + 1) * c];
                        for (d, &v) in drow.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                }
                graph.accumulate(*x, Tensor::new(shape, dx)?);
            }
        }

        Op::SliceRows { x, start } => {
            if graph.needs(*x) {
                let shape = graph.value(*x).shape.clone();
                let c = shape[1];
                let mut dx = vec![0.0; shape[0] * c];
                dx[start * c..start * c + g.len()].copy_from_slice(&g.data);
                graph.accumulate(*x, Tensor::new(shape, dx)?);
            }
        }

        Op::SumAll { x } => {
            if graph.needs(*x) {
                let shape = graph.value(*x).shape.clone();
                graph.accumulate(*x, Tensor::full(&shape, g.data[0]));
            }
        }

        Op::MeanAll { x } => {
            if graph.needs(*x) {
                let shape = graph.value(*x).shape.clone();
                let n: usize = shape.iter().product();
                graph.accumulate(*x, Tensor::full(&shape, g.data[0] / n as f64));
            }
        }

        Op::Chamfer {
            x,
            target,
            mode,
            nn_xt,
            nn_tx,
        } => {
            if graph.needs(*x) {
                let xv = graph.value(*x);
                let p = xv.shape[0];
                let t = target.len();
                let (sx, st) = match mode {
                    ChamferMode::Sum => (1.0, 1.0),
                    ChamferMode::Mean => (1.0 / p as f64, 1.0 / t as f64),
                };
                let up = g.data[0];
                let mut dx = vec![0.0; p * 3];
                for j in 0..p {
                    let tgt = target[nn_xt[j] as usize];
                    add_unit_diff(&mut dx[j * 3..j * 3 + 3], xv.row(j), &tgt, up * sx);
                }
                for (q, tgt) in target.iter().enumerate() {
                    let j = nn_tx[q] as usize;
                    let row = &xv.data[j * 3..j * 3 + 3];
                    let mut tmp = [0.0; 3];
                    add_unit_diff(&mut tmp, row, tgt, up * st);
                    dx[j * 3] += tmp[0];
                    dx[j * 3 + 1] += tmp[1];
                    dx[j * 3 + 2] += tmp[2];
                }
                graph.accumulate(*x, Tensor::new(vec![p, 3], dx)?);
            }
        }

        Op::NPairTerms { sims, pos } => {
            if graph.needs(*sims) {
                let sv = graph.value(*sims);
                let (r, m) = (sv.shape[0], sv.shape[1]);
                let mut dx = vec![0.0; r * m];
                for i in 0..r {
                    npair_row_grad(
                        &sv.data[i * m..(i + 1) * m],
                        pos[i] as usize,
                        g.data[i],
                        &mut dx[i * m..(i + 1) * m],
                    );
                }
                graph.accumulate(*sims, Tensor::new(vec![r, m], dx)?);
            }
        }

        Op::CosineSetLoss {
            pred,
            target,
            oriented,
        } => {
            if graph.needs(*pred) {
                let pv = graph.value(*pred);
                let n = target.len();
                let scale = -g.data[0] / n as f64;
                let mut dx = vec![0.0; n * 3];
                for (i, t) in target.iter().enumerate() {
                    let row = pv.row(i);
                    let s = if *oriented {
                        1.0
                    } else {
                        let c = row[0] * t[0] + row[1] * t[1] + row[2] * t[2];
                        if c > 0.0 {
                            1.0
                        } else if c < 0.0 {
                            -1.0
                        } else {
                            0.0 // subgradient at the orthogonal kink
                        }
                    };
                    dx[i * 3] = scale * s * t[0];
                    dx[i * 3 + 1] = scale * s * t[1];
                    dx[i * 3 + 2] = scale * s * t[2];
                }
                graph.accumulate(*pred, Tensor::new(vec![n, 3], dx)?);
            }
        }
    }
    Ok(())
}

/// `dst += scale · (a − b)/‖a − b‖`, zero when the points coincide.
fn add_unit_diff(dst: &mut [f64], a: &[f64], b: &[f64; 3], scale: f64) {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if n > 0.0 {
        dst[0] += scale * d[0] / n;
        dst[1] += scale * d[1] / n;
        dst[2] += scale * d[2] / n;
    }
}
