//! Reverse-mode differentiation over a per-forward computation graph.
//!
//! A [`Graph`] records one forward pass. Parameters enter it through
//! [`Graph::param`], which reads from a [`GradientTape`]; [`Graph::backward`]
//! walks the recorded ops in reverse and accumulates parameter gradients back
//! into the tape. Every op has a closed-form backward.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::losses::{self, HeatmapFocal, MaskFocal};
use crate::tensor::{
    attention_core, gelu_grad_scalar, gelu_scalar, gemm_acc, gemm_nt_acc, gemm_tn_acc,
    head_scatter, head_slice, layer_norm_with_stats, sigmoid_scalar, softmax_rows_inplace, Real,
    Tensor,
};

/// Parameter registry plus a gradient accumulator of identical shapes.
#[derive(Debug, Clone, Default)]
pub struct GradientTape<T> {
    params: IndexMap<String, Tensor<T>>,
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Real> GradientTape<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            grads: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_and_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.params
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, p), g)| (k.as_str(), p, g))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))?;
        if slot.shape() != grad.shape() {
            return Err(Error::dim(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                grad.shape(),
                slot.shape()
            )));
        }
        slot.add_assign(grad)
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn cast<U: Real>(&self) -> GradientTape<U> {
        let mut out = GradientTape::new();
        for (k, v) in &self.params {
            out.register(k.clone(), v.cast());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalarAt(NodeId, NodeId, usize),
    LinComb(Vec<(NodeId, T)>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Similarity {
        q: NodeId,
        k: NodeId,
        heads: usize,
    },
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Im2col3x3 {
        x: NodeId,
        side: usize,
    },
    Gather(NodeId, Vec<usize>),
    BoxAtCell {
        offset: NodeId,
        size: NodeId,
        cell: usize,
        grid: usize,
    },
    FocalHeatmap {
        score: NodeId,
        gt: Tensor<T>,
        params: HeatmapFocal,
    },
    FocalMask {
        pred: NodeId,
        gt: Tensor<T>,
        params: MaskFocal,
    },
    CrossEntropy {
        probs: NodeId,
        class: usize,
    },
    L1 {
        pred: NodeId,
        gt: [f64; 4],
    },
    Giou {
        pred: NodeId,
        gt: [f64; 4],
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<NodeId> {
        value.ensure_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, tape: &GradientTape<T>, name: &str) -> Result<NodeId> {
        let value = tape.get(name)?.clone();
        self.push(value, Op::Param(name.to_string()), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = self.value(a).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::dim(format!("row bias has {} entries, expected {n}", b.len())));
        }
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let ng = self.ng(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Every entry of `a` times the scalar `s[idx]`.
    pub fn mul_scalar_at(&mut self, a: NodeId, s: NodeId, idx: usize) -> Result<NodeId> {
        let sv = *self
            .value(s)
            .data()
            .get(idx)
            .ok_or_else(|| Error::dim(format!("scalar index {idx} out of range")))?;
        let value = self.value(a).scale(sv);
        let ng = self.ng(&[a, s]);
        self.push(value, Op::MulScalarAt(a, s, idx), ng)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::dim("empty linear combination"))?;
        let mut value = Tensor::zeros(self.value(first).shape());
        for &(id, c) in terms {
            let x = self.value(id);
            x.same_shape(&value)?;
            for (v, &xv) in value.data_mut().iter_mut().zip(x.data()) {
                *v += c * xv;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&ids);
        self.push(value, Op::LinComb(terms.to_vec()), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.lin_comb(&[(a, c)])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (value, stats) =
            layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(gelu_scalar);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Softmax over the last axis of a rank-2 node.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, n) = self.value(a).dims2()?;
        let mut value = self.value(a).clone();
        softmax_rows_inplace(value.data_mut(), n);
        let ng = self.ng(&[a]);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Multi-head scaled dot-product attention on projected inputs.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (value, probs, _) = attention_core(self.value(q), self.value(k), self.value(v), heads)?;
        let ng = self.ng(&[q, k, v]);
        self.push(value, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Head-averaged scaled dot products `q·kᵀ/√d`, shape `[Nq × Nk]`.
    pub fn similarity(&mut self, q: NodeId, k: NodeId, heads: usize) -> Result<NodeId> {
        let (value, _, scores) = attention_core(self.value(q), self.value(k), self.value(k), heads)?;
        let (nq, _) = value.dims2()?;
        let (nk, _) = self.value(k).dims2()?;
        let hw = T::one() / T::lit(heads as f64);
        let mut mean = vec![T::zero(); nq * nk];
        for h in 0..heads {
            for (m, &s) in mean.iter_mut().zip(&scores[h * nq * nk..(h + 1) * nq * nk]) {
                *m += s * hw;
            }
        }
        let ng = self.ng(&[q, k]);
        self.push(Tensor::new(vec![nq, nk], mean)?, Op::Similarity { q, k, heads }, ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(a).slice_rows(start, len)?;
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Columns `start..start+len` of a rank-2 node.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("column slice {start}..{} out of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::dim(format!("concat: {pn} columns vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Unfolds a channels-last `[side² × C]` map into 3×3 zero-padded neighbourhoods,
    /// giving `[side² × 9C]` so a 3×3 convolution becomes one matmul.
    pub fn im2col3x3(&mut self, x: NodeId, side: usize) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2()?;
        if n != side * side {
            return Err(Error::dim(format!("im2col: {n} rows is not {side}²")));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * 9 * c];
        for r in 0..side {
            for col in 0..side {
                let row = &mut out[(r * side + col) * 9 * c..(r * side + col + 1) * 9 * c];
                for (t, (dr, dc)) in KERNEL_OFFSETS.iter().enumerate() {
                    let rr = r as isize + dr;
                    let cc = col as isize + dc;
                    if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                        continue;
                    }
                    let s = (rr as usize * side + cc as usize) * c;
                    row[t * c..(t + 1) * c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, 9 * c], out)?, Op::Im2col3x3 { x, side }, ng)
    }

    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(
                *src.get(i)
                    .ok_or_else(|| Error::dim(format!("gather index {i} out of range")))?,
            );
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![idx.len()], data)?, Op::Gather(a, idx.to_vec()), ng)
    }

    /// Normalized `(cx, cy, w, h)` decoded at one score-grid cell from
    /// channels-last offset and size maps `[G² × 2]`.
    pub fn box_at_cell(&mut self, offset: NodeId, size: NodeId, cell: usize, grid: usize) -> Result<NodeId> {
        let n = grid * grid;
        let o = self.value(offset);
        let s = self.value(size);
        if o.len() != 2 * n || s.len() != 2 * n || cell >= n {
            return Err(Error::dim("box_at_cell: maps must be [G² × 2]"));
        }
        let g = T::lit(grid as f64);
        let row = T::lit((cell / grid) as f64);
        let col = T::lit((cell % grid) as f64);
        let value = vec![
            (col + o.data()[2 * cell]) / g,
            (row + o.data()[2 * cell + 1]) / g,
            s.data()[2 * cell],
            s.data()[2 * cell + 1],
        ];
        let ng = self.ng(&[offset, size]);
        self.push(
            Tensor::new(vec![4], value)?,
            Op::BoxAtCell {
                offset,
                size,
                cell,
                grid,
            },
            ng,
        )
    }

    pub fn focal_heatmap(&mut self, score: NodeId, gt: &Tensor<T>, params: HeatmapFocal) -> Result<NodeId> {
        let v = losses::focal_heatmap(self.value(score), gt, params)?;
        let ng = self.ng(&[score]);
        self.push(
            Tensor::scalar(v),
            Op::FocalHeatmap {
                score,
                gt: gt.clone(),
                params,
            },
            ng,
        )
    }

    pub fn focal_mask(&mut self, pred: NodeId, gt: &Tensor<T>, params: MaskFocal) -> Result<NodeId> {
        let v = losses::focal_mask(self.value(pred), gt, params)?;
        let ng = self.ng(&[pred]);
        self.push(
            Tensor::scalar(v),
            Op::FocalMask {
                pred,
                gt: gt.clone(),
                params,
            },
            ng,
        )
    }

    /// Cross-entropy of a `[1 × K]` probability row against class `class`.
    pub fn cross_entropy(&mut self, probs: NodeId, class: usize) -> Result<NodeId> {
        let p = self.value(probs).data();
        let pc = *p
            .get(class)
            .ok_or_else(|| Error::dim(format!("class {class} out of range")))?;
        let v = -pc.max(T::lit(losses::PROB_EPS)).ln();
        let ng = self.ng(&[probs]);
        self.push(Tensor::scalar(v), Op::CrossEntropy { probs, class }, ng)
    }

    pub fn l1_box(&mut self, pred: NodeId, gt: [f64; 4]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != 4 {
            return Err(Error::dim("l1_box expects a 4-vector"));
        }
        let v: f64 = p.iter().zip(gt).map(|(a, b)| (a.as_f64() - b).abs()).sum::<f64>() / 4.0;
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(T::lit(v)), Op::L1 { pred, gt }, ng)
    }

    /// `1 − GIoU(pred, gt)` on `(cx, cy, w, h)` boxes.
    pub fn giou_loss(&mut self, pred: NodeId, gt: [f64; 4]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != 4 {
            return Err(Error::dim("giou_loss expects a 4-vector"));
        }
        let pb = [p[0].as_f64(), p[1].as_f64(), p[2].as_f64(), p[3].as_f64()];
        let (g, _) = losses::giou_with_grad(pb, gt)?;
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(T::lit(1.0 - g)), Op::Giou { pred, gt }, ng)
    }

    /// Back-propagates from a scalar node and adds parameter gradients into `tape`.
    pub fn backward(&self, loss: NodeId, tape: &mut GradientTape<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward starts from a scalar node"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_op(idx, &gout, &mut grads, tape)?;
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backward_op(
        &self,
        idx: usize,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        tape: &mut GradientTape<T>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => tape.accumulate(name, gout)?,
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt_acc(m, n, k, gout.data(), bv.data(), &mut ga);
                    self.acc(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn_acc(k, m, n, av.data(), gout.data(), &mut gb);
                    self.acc(grads, *b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone())?;
                self.acc(grads, *b, gout.clone())?;
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, gout.clone())?;
                if self.wants(*bias) {
                    let (_, n) = gout.dims2()?;
                    let mut gb = vec![T::zero(); n];
                    for row in gout.data().chunks(n) {
                        for (g, &r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y)?)?;
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x)?)?;
                }
            }
            Op::MulScalarAt(a, s, i) => {
                let sv = self.value(*s);
                if self.wants(*a) {
                    self.acc(grads, *a, gout.scale(sv.data()[*i]))?;
                }
                if self.wants(*s) {
                    let dot: T = gout
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .sum();
                    let mut gs = Tensor::zeros(sv.shape());
                    gs.data_mut()[*i] = dot;
                    self.acc(grads, *s, gs)?;
                }
            }
            Op::LinComb(terms) => {
                for &(id, c) in terms {
                    self.acc(grads, id, gout.scale(c))?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (row, hrow) in gout.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * hrow[j];
                            gb[j] += row[j];
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    self.acc(grads, *gamma, Tensor::new(gshape.clone(), gg)?)?;
                    self.acc(grads, *beta, Tensor::new(gshape, gb)?)?;
                }
                if self.wants(*x) {
                    let cf = T::lit(c as f64);
                    let mut gx = vec![T::zero(); gout.len()];
                    for (r, (row, hrow)) in gout.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = row[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= cf;
                        mean_dh /= cf;
                        for j in 0..c {
                            let d = row[j] * gv[j];
                            gx[r * c + j] = rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(grads, *x, Tensor::new(shape, gx)?)?;
                }
            }
            Op::Gelu(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| g * gelu_grad_scalar(x))?;
                self.acc(grads, *a, g)?;
            }
            Op::Relu(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() })?;
                self.acc(grads, *a, g)?;
            }
            Op::Sigmoid(a) => {
                let g = gout.zip_map(&node.value, |g, y| g * y * (T::one() - y))?;
                self.acc(grads, *a, g)?;
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = node.value.dims2()?;
                let mut g = vec![T::zero(); gout.len()];
                for ((gr, yr), out) in gout
                    .data()
                    .chunks(n)
                    .zip(node.value.data().chunks(n))
                    .zip(g.chunks_mut(n))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(gout.shape().to_vec(), g)?)?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gout, grads)?;
            }
            Op::Similarity { q, k, heads } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let (nq, c) = qv.dims2()?;
                let (nk, _) = kv.dims2()?;
                let d = c / heads;
                let s = T::one() / (T::lit(d as f64).sqrt() * T::lit(*heads as f64));
                let gs = gout.scale(s);
                let mut gq = vec![T::zero(); nq * c];
                let mut gk = vec![T::zero(); nk * c];
                let mut qh = vec![T::zero(); nq * d];
                let mut kh = vec![T::zero(); nk * d];
                for h in 0..*heads {
                    head_slice(qv.data(), nq, c, h, d, &mut qh);
                    head_slice(kv.data(), nk, c, h, d, &mut kh);
                    let mut dq = vec![T::zero(); nq * d];
                    gemm_acc(nq, nk, d, gs.data(), &kh, &mut dq);
                    let mut dk = vec![T::zero(); nk * d];
                    gemm_tn_acc(nk, nq, d, gs.data(), &qh, &mut dk);
                    head_scatter(&dq, nq, c, h, d, &mut gq);
                    head_scatter(&dk, nk, c, h, d, &mut gk);
                }
                self.acc(grads, *q, Tensor::new(vec![nq, c], gq)?)?;
                self.acc(grads, *k, Tensor::new(vec![nk, c], gk)?)?;
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let (_, n) = av.dims2()?;
                let mut g = Tensor::zeros(av.shape());
                g.data_mut()[start * n..start * n + gout.len()].copy_from_slice(gout.data());
                self.acc(grads, *a, g)?;
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (m, n) = av.dims2()?;
                let (_, len) = gout.dims2()?;
                let mut g = Tensor::zeros(av.shape());
                for r in 0..m {
                    g.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&gout.data()[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, g)?;
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    if self.wants(p) {
                        let g = Tensor::new(shape, gout.data()[off..off + len].to_vec())?;
                        self.acc(grads, p, g)?;
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, gout.clone().reshape(&shape)?)?;
            }
            Op::Im2col3x3 { x, side } => {
                let (n, c) = self.value(*x).dims2()?;
                let mut g = vec![T::zero(); n * c];
                let side = *side;
                for r in 0..side {
                    for col in 0..side {
                        let row = &gout.data()[(r * side + col) * 9 * c..(r * side + col + 1) * 9 * c];
                        for (t, (dr, dc)) in KERNEL_OFFSETS.iter().enumerate() {
                            let rr = r as isize + dr;
                            let cc = col as isize + dc;
                            if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                                continue;
                            }
                            let s = (rr as usize * side + cc as usize) * c;
                            for j in 0..c {
                                g[s + j] += row[t * c + j];
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, c], g)?)?;
            }
            Op::Gather(a, idx) => {
                let mut g = Tensor::zeros(self.value(*a).shape());
                for (&i, &gv) in idx.iter().zip(gout.data()) {
                    g.data_mut()[i] += gv;
                }
                self.acc(grads, *a, g)?;
            }
            Op::BoxAtCell {
                offset,
                size,
                cell,
                grid,
            } => {
                let gd = gout.data();
                let inv = T::one() / T::lit(*grid as f64);
                if self.wants(*offset) {
                    let mut g = Tensor::zeros(self.value(*offset).shape());
                    g.data_mut()[2 * cell] = gd[0] * inv;
                    g.data_mut()[2 * cell + 1] = gd[1] * inv;
                    self.acc(grads, *offset, g)?;
                }
                if self.wants(*size) {
                    let mut g = Tensor::zeros(self.value(*size).shape());
                    g.data_mut()[2 * cell] = gd[2];
                    g.data_mut()[2 * cell + 1] = gd[3];
                    self.acc(grads, *size, g)?;
                }
            }
            Op::FocalHeatmap { score, gt, params } => {
                let g = losses::focal_heatmap_grad(self.value(*score), gt, *params)?;
                self.acc(grads, *score, g.scale(gout.data()[0]))?;
            }
            Op::FocalMask { pred, gt, params } => {
                let g = losses::focal_mask_grad(self.value(*pred), gt, *params)?;
                self.acc(grads, *pred, g.scale(gout.data()[0]))?;
            }
            Op::CrossEntropy { probs, class } => {
                let pv = self.value(*probs);
                let mut g = Tensor::zeros(pv.shape());
                let p = pv.data()[*class];
                if p > T::lit(losses::PROB_EPS) {
                    g.data_mut()[*class] = -gout.data()[0] / p;
                }
                self.acc(grads, *probs, g)?;
            }
            Op::L1 { pred, gt } => {
                let p = self.value(*pred).data();
                let q = T::lit(0.25) * gout.data()[0];
                let g: Vec<T> = p
                    .iter()
                    .zip(gt)
                    .map(|(&a, &b)| {
                        let d = a.as_f64() - b;
                        if d > 0.0 {
                            q
                        } else if d < 0.0 {
                            -q
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *pred, Tensor::new(vec![4], g)?)?;
            }
            Op::Giou { pred, gt } => {
                let p = self.value(*pred).data();
                let pb = [p[0].as_f64(), p[1].as_f64(), p[2].as_f64(), p[3].as_f64()];
                let (_, dg) = losses::giou_with_grad(pb, *gt)?;
                let s = -gout.data()[0];
                let g = dg.iter().map(|&d| s * T::lit(d)).collect();
                self.acc(grads, *pred, Tensor::new(vec![4], g)?)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (nq, c) = qv.dims2()?;
        let (nk, _) = kv.dims2()?;
        let d = c / heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut gq = vec![T::zero(); nq * c];
        let mut gk = vec![T::zero(); nk * c];
        let mut gv = vec![T::zero(); nk * c];
        let mut qh = vec![T::zero(); nq * d];
        let mut kh = vec![T::zero(); nk * d];
        let mut vh = vec![T::zero(); nk * d];
        let mut goh = vec![T::zero(); nq * d];
        for h in 0..heads {
            head_slice(qv.data(), nq, c, h, d, &mut qh);
            head_slice(kv.data(), nk, c, h, d, &mut kh);
            head_slice(vv.data(), nk, c, h, d, &mut vh);
            head_slice(gout.data(), nq, c, h, d, &mut goh);
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];

            let mut dv = vec![T::zero(); nk * d];
            gemm_tn_acc(nk, nq, d, p, &goh, &mut dv);
            head_scatter(&dv, nk, c, h, d, &mut gv);

            let mut dp = vec![T::zero(); nq * nk];
            gemm_nt_acc(nq, d, nk, &goh, &vh, &mut dp);
            for (drow, prow) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            let mut dq = vec![T::zero(); nq * d];
            gemm_acc(nq, nk, d, &dp, &kh, &mut dq);
            head_scatter(&dq, nq, c, h, d, &mut gq);
            let mut dk = vec![T::zero(); nk * d];
            gemm_tn_acc(nk, nq, d, &dp, &qh, &mut dk);
            head_scatter(&dk, nk, c, h, d, &mut gk);
        }
        self.acc(grads, q, Tensor::new(vec![nq, c], gq)?)?;
        self.acc(grads, k, Tensor::new(vec![nk, c], gk)?)?;
        self.acc(grads, v, Tensor::new(vec![nk, c], gv)?)?;
        Ok(())
    }
}

const KERNEL_OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "parameter",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::MulScalarAt(..) => "mul_scalar",
        Op::LinComb(_) => "lin_comb",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::SoftmaxRows(_) => "softmax",
        Op::Attention { .. } => "attention",
        Op::Similarity { .. } => "similarity",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::Reshape(_) => "reshape",
        Op::Im2col3x3 { .. } => "im2col",
        Op::Gather(..) => "gather",
        Op::BoxAtCell { .. } => "box_at_cell",
        Op::FocalHeatmap { .. } => "focal_heatmap",
        Op::FocalMask { .. } => "focal_mask",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::L1 { .. } => "l1",
        Op::Giou { .. } => "giou",
    }
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` must build the full forward graph from the tape's current
/// parameters and return the scalar loss node. Up to `coords_per_param`
/// coordinates of each parameter are sampled (deterministically from `seed`);
/// the returned error is `max |a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<T: Real, F>(
    tape: &mut GradientTape<T>,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&GradientTape<T>) -> Result<(Graph<T>, NodeId)>,
{
    use rand::{Rng, SeedableRng};

    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Parameter(format!("grad_check eps {eps} outside [1e-6, 1e-2]")));
    }
    tape.zero_grads();
    let (g, loss) = loss_fn(tape)?;
    if !g.value(loss).data()[0].as_f64().is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    g.backward(loss, tape)?;
    drop(g);

    let mut eval = |tape: &GradientTape<T>| -> Result<f64> {
        let (g, l) = loss_fn(tape)?;
        let v = g.value(l).data()[0].as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
    let names: Vec<String> = tape.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_pair: (0.0, 0.0),
        coords_checked: 0,
    };
    for name in names {
        let len = tape.get(&name)?.len();
        let coords: Vec<usize> = if len <= coords_per_param {
            (0..len).collect()
        } else {
            (0..coords_per_param).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let analytic = tape.grad(&name)?.data()[i].as_f64();
            let orig = tape.get(&name)?.data()[i];
            // step by the representable perturbation, not the nominal one
            let (hi, lo) = (orig + T::lit(eps), orig - T::lit(eps));
            tape.get_mut(&name)?.data_mut()[i] = hi;
            let up = eval(tape)?;
            tape.get_mut(&name)?.data_mut()[i] = lo;
            let down = eval(tape)?;
            tape.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (hi.as_f64() - lo.as_f64());
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
                report.worst_pair = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but compares directional derivatives: for each
/// parameter tensor, `dirs_per_param` random unit directions `v` are drawn and
/// `∇L·v` is compared with the central difference of `L` along `v`. Unlike
/// single coordinates, whose true derivative can sit below the finite
/// difference noise floor in deep graphs, a direction sees the whole gradient
/// of the tensor.
///
/// Loss differences below `floor_ulps` units of roundoff in `L` cannot be
/// resolved, so the error denominator never drops below that level. Forward
/// passes accumulate on the order of 100 ulps of noise, so checking to a
/// relative tolerance `tol` needs `floor_ulps ≈ 100 / tol`.
pub fn grad_check_directional<T: Real, F>(
    tape: &mut GradientTape<T>,
    eps: f64,
    dirs_per_param: usize,
    floor_ulps: f64,
    seed: u64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&GradientTape<T>) -> Result<(Graph<T>, NodeId)>,
{
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Parameter(format!("grad_check eps {eps} outside [1e-6, 1e-2]")));
    }
    tape.zero_grads();
    let (g, loss) = loss_fn(tape)?;
    if !g.value(loss).data()[0].as_f64().is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let base = g.value(loss).data()[0].as_f64();
    g.backward(loss, tape)?;
    drop(g);
    let floor = floor_ulps * T::epsilon().as_f64() * base.abs().max(f64::MIN_POSITIVE);

    let mut eval = |tape: &GradientTape<T>| -> Result<f64> {
        let (g, l) = loss_fn(tape)?;
        let v = g.value(l).data()[0].as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
    let names: Vec<String> = tape.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_pair: (0.0, 0.0),
        coords_checked: 0,
    };
    for name in names {
        let orig = tape.get(&name)?.clone();
        let grad: Vec<f64> = tape.grad(&name)?.data().iter().map(|v| v.as_f64()).collect();
        for k in 0..dirs_per_param {
            let mut v: Vec<f64> = (0..orig.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x /= norm);
            let hi: Vec<T> = orig.data().iter().zip(&v).map(|(&o, &d)| o + T::lit(eps * d)).collect();
            let lo: Vec<T> = orig.data().iter().zip(&v).map(|(&o, &d)| o - T::lit(eps * d)).collect();
            // both sides measured over the representable displacement
            let analytic: f64 = grad
                .iter()
                .zip(hi.iter().zip(&lo))
                .map(|(g, (h, l))| g * (h.as_f64() - l.as_f64()))
                .sum();
            tape.get_mut(&name)?.data_mut().copy_from_slice(&hi);
            let up = eval(tape)?;
            tape.get_mut(&name)?.data_mut().copy_from_slice(&lo);
            let down = eval(tape)?;
            tape.get_mut(&name)?.data_mut().copy_from_slice(orig.data());
            let numeric = up - down;
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}/dir{k}");
                report.worst_pair = (analytic / (2.0 * eps), numeric / (2.0 * eps));
            }
        }
    }
    Ok(report)
}
