//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every primitive applied during one forward pass, in
//! execution order. Leaves wrap shared tensors; frozen leaves never receive a
//! gradient buffer. [`Tape::backward`] walks the records once in reverse.
//! Every matmul-shaped primitive charges its FLOPs to the current [`Scope`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flops::{Branch, FlopCounts, LinearMode, Scope};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused causal attention call over `[batch·seq, heads·d_head]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_head: usize,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Sum(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        cos_sin: Arc<Vec<(S, S)>>,
        pairs_per_head: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<S>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
    scope: Scope,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    scope: Scope,
    flops: FlopCounts,
    warnings: Vec<String>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            scope: Scope::default(),
            flops: FlopCounts::default(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_scope(&mut self, layer: Option<usize>, branch: Branch) -> Scope {
        std::mem::replace(&mut self.scope, Scope { layer, branch })
    }

    pub fn restore_scope(&mut self, s: Scope) {
        self.scope = s;
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn flops(&self) -> &FlopCounts {
        &self.flops
    }

    pub fn flops_mut(&mut self) -> &mut FlopCounts {
        &mut self.flops
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Leaf vars that hold a gradient after `backward`.
    pub fn vars_with_grad(&self) -> Vec<Var> {
        (0..self.grads.len())
            .filter(|&i| self.grads[i].is_some() && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect()
    }

    /// Saved attention probabilities `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite() || self.inputs_nonfinite(&op),
            "non-finite output from finite inputs"
        );
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_nonfinite(&self, op: &Op<S>) -> bool {
        let ins: Vec<Var> = match op {
            Op::Leaf => return true,
            Op::Scale(_, c) if !c.is_finite() => return true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::Sum(a) | Op::SoftmaxRows(a) => vec![*a],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Embedding { table, .. } => vec![*table],
            Op::Rope { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows(a, _) | Op::GatherCols(a, _) | Op::ScatterCols(a, _) => vec![*a],
            Op::ScatterRows(parts) => parts.iter().map(|(p, _)| *p).collect(),
        };
        ins.iter().any(|v| !self.nodes[v.0].value.all_finite())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen input or weight: no gradient is ever allocated for it.
    pub fn constant(&mut self, t: Arc<Tensor<S>>) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(Arc::new(t), true)
    }

    // ---- primitives ---------------------------------------------------

    /// `a · b` for `a: m×k` (activation) and `b: k×n` (weight).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let n = bv.shape()[1];
        let mut out = vec![S::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let cost = 2 * (m * k * n) as u64;
        self.flops.add(self.scope.layer, self.scope.path(LinearMode::Fwd), cost);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Row-wise softmax over the last axis with an optional additive mask
    /// (`−∞` entries give exact zeros). A fully masked row yields zeros and a
    /// recorded warning.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<S>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::dim("softmax_rows mask", xv.shape(), m.shape()));
            }
        }
        let n = xv.cols();
        if n == 0 {
            return Err(Error::Precondition("softmax over empty axis".into()));
        }
        let mut out = xv.data().to_vec();
        if let Some(m) = mask {
            for (o, &mv) in out.iter_mut().zip(m.data()) {
                *o = *o + mv;
            }
        }
        let shape = xv.shape().to_vec();
        let mut degenerate = 0usize;
        for row in out.chunks_mut(n) {
            if !softmax_in_place(row) {
                degenerate += 1;
            }
        }
        if degenerate > 0 {
            let msg = format!("softmax: {degenerate} fully masked row(s) set to zero");
            log::warn!("{msg}");
            self.warnings.push(msg);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    /// `x / sqrt(mean(x²) + eps) · gain` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(Error::dim("rmsnorm gain", xv.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(xv.rows());
        let dn = S::of_usize(d);
        for row in xv.data().chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let r = S::one() / (ms + eps).sqrt();
            let r = if r.is_finite() { r } else { S::zero() };
            inv.push(r);
            out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * r * g));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms: inv }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Input(format!(
                    "token id {id} at position {pos} out of range (vocab {vocab})"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotate channel pairs `(2i, 2i+1)` inside each head. `cos_sin` holds one
    /// `(cos, sin)` per `(row, pair-within-head)`.
    pub fn rope(&mut self, x: Var, cos_sin: Arc<Vec<(S, S)>>, d_head: usize) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = (xv.rows(), xv.cols());
        if !d_head.is_multiple_of(2) || d % d_head != 0 {
            return Err(Error::Precondition(format!(
                "rope needs even d_head dividing width (d_head {d_head}, width {d})"
            )));
        }
        let pph = d_head / 2;
        if cos_sin.len() != t * pph {
            return Err(Error::dim("rope table", &[t, pph], &[cos_sin.len()]));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, d, d_head, &cos_sin, false);
        let tt = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            tt,
            Op::Rope {
                x,
                cos_sin,
                pairs_per_head: pph,
            },
            rg,
        ))
    }

    /// Causal multi-head attention `softmax(q·kᵀ/√d_head + causal)·v`, heads
    /// concatenated. Inputs are `[batch·seq, heads·d_head]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let AttnShape {
            batch,
            seq,
            heads,
            d_head,
        } = shape;
        let width = heads * d_head;
        for var in [q, k, v] {
            let s = self.value(var).shape();
            if s != [batch * seq, width] {
                return Err(Error::dim("attention", s, &[batch * seq, width]));
            }
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let scale = S::one() / S::of_usize(d_head).sqrt();
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let qrow = &qd[(b * seq + t) * width + h * d_head..][..d_head];
                    let prow = &mut probs[pbase + t * seq..pbase + (t + 1) * seq];
                    for j in 0..=t {
                        let krow = &kd[(b * seq + j) * width + h * d_head..][..d_head];
                        prow[j] = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut prow[..=t]);
                    let orow = &mut out[(b * seq + t) * width + h * d_head..][..d_head];
                    for j in 0..=t {
                        let p = prow[j];
                        let vrow = &vd[(b * seq + j) * width + h * d_head..][..d_head];
                        for c in 0..d_head {
                            orow[c] = orow[c] + p * vrow[c];
                        }
                    }
                }
            }
        }
        let pairs = (batch * heads * seq * (seq + 1) / 2) as u64;
        self.flops.add(
            self.scope.layer,
            self.scope.path(LinearMode::Fwd),
            2 * pairs * 2 * d_head as u64,
        );
        let t = Tensor::new(vec![batch * seq, width], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Mean of `−log softmax(logits)[r, target]` over rows with a true mask.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (t, vocab) = (lv.rows(), lv.cols());
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim("cross_entropy", &[t], &[targets.len(), mask.len()]));
        }
        let rows: Vec<usize> = (0..t).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::Input("loss mask has no true positions".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = S::zero();
        for &r in &rows {
            let tgt = targets[r];
            if tgt >= vocab {
                return Err(Error::Input(format!(
                    "target {tgt} at position {r} out of range (vocab {vocab})"
                )));
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln() + mx;
            total = total + (lse - row[tgt]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let loss = total / S::of_usize(rows.len());
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows,
                probs,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Input(format!("row index {i} out of range ({r} rows)")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Assemble a `rows × cols` tensor from parts placed at the given row
    /// indices. Uncovered rows are zero; overlapping placements are rejected.
    pub fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize) -> Result<Var> {
        let cols = parts
            .iter()
            .find(|(p, _)| self.value(*p).rows() > 0)
            .map(|(p, _)| self.value(*p).cols())
            .or_else(|| parts.first().map(|(p, _)| self.value(*p).cols()))
            .unwrap_or(0);
        let mut out = vec![S::zero(); rows * cols];
        let mut seen = vec![false; rows];
        for (p, idx) in parts {
            let pv = self.value(*p);
            if pv.rows() != idx.len() || (pv.rows() > 0 && pv.cols() != cols) {
                return Err(Error::dim("scatter_rows", pv.shape(), &[idx.len(), cols]));
            }
            for (src, &dst) in idx.iter().enumerate() {
                if dst >= rows || seen[dst] {
                    return Err(Error::Input(format!(
                        "scatter_rows: row {dst} out of range or duplicated"
                    )));
                }
                seen[dst] = true;
                out[dst * cols..(dst + 1) * cols].copy_from_slice(pv.row(src));
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = parts.iter().any(|(p, _)| self.rg(*p));
        Ok(self.push(t, Op::ScatterRows(parts.to_vec()), rg))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Input(format!("column index {bad} out of range ({c} cols)")));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for row in xv.data().chunks(c.max(1)).take(r) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let t = Tensor::new(vec![r, idx.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherCols(x, idx.to_vec()), rg))
    }

    /// Place the columns of `x` at `idx` inside a zero `rows × total` tensor.
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], total: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if idx.len() != c {
            return Err(Error::dim("scatter_cols", xv.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= total) {
            return Err(Error::Input(format!("column index {bad} out of range ({total})")));
        }
        let mut out = vec![S::zero(); r * total];
        for (i, row) in xv.data().chunks(c.max(1)).take(r).enumerate() {
            let dst = &mut out[i * total..(i + 1) * total];
            for (&j, &v) in idx.iter().zip(row) {
                dst[j] = v;
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ScatterCols(x, idx.to_vec()), rg))
    }

    // ---- backward -----------------------------------------------------

    fn acc(&mut self, v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagate from a scalar `loss`. Intermediate gradients are freed as
    /// they are consumed; leaf gradients are kept.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, g)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Tensor<S>) -> Result<()> {
        let scope = self.nodes[i].scope;
        // Detach the op so the tape can be mutated while reading saved state.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backward_op(i, &op, g, scope);
        self.nodes[i].op = op;
        res
    }

    fn backward_op(&mut self, i: usize, op: &Op<S>, g: Tensor<S>, scope: Scope) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value_arc(a), self.value_arc(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let cost = 2 * (m * k * n) as u64;
                if self.rg(a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.flops.add(scope.layer, scope.path(LinearMode::BwdInput), cost);
                    self.acc(a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.rg(b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    self.flops.add(scope.layer, scope.path(LinearMode::BwdWeight), cost);
                    self.acc(b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                if self.rg(a) && self.rg(b) {
                    self.acc(a, g.clone());
                    self.acc(b, g);
                } else if self.rg(a) {
                    self.acc(a, g);
                } else {
                    self.acc(b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value_arc(a), self.value_arc(b));
                if self.rg(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.rg(b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => self.acc(a, g.map(|x| x * c)),
            Op::Silu(a) => {
                let av = self.value_arc(a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gy, &x)| {
                        let s = sigmoid(x);
                        gy * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                self.acc(a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                let gv = g.data()[0];
                self.acc(a, Tensor::full(&shape, gv));
            }
            Op::SoftmaxRows(x) => {
                let y = self.value_arc(Var(i));
                let n = y.cols();
                let mut d = vec![S::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dotp: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.acc(x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::RmsNorm {
                x,
                gain,
                ref inv_rms,
            } => {
                let (xv, gv) = (self.value_arc(x), self.value_arc(gain));
                let dcols = xv.cols();
                let dn = S::of_usize(dcols);
                if self.rg(x) {
                    let mut dx = vec![S::zero(); xv.len()];
                    for (r, ((dxr, xr), gr)) in dx
                        .chunks_mut(dcols)
                        .zip(xv.data().chunks(dcols))
                        .zip(g.data().chunks(dcols))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        let s: S = (0..dcols).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                        let coef = inv * inv * inv * s / dn;
                        for j in 0..dcols {
                            dxr[j] = inv * gr[j] * gv.data()[j] - coef * xr[j];
                        }
                    }
                    self.acc(x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.rg(gain) {
                    let mut dg = vec![S::zero(); dcols];
                    for (r, (xr, gr)) in xv.data().chunks(dcols).zip(g.data().chunks(dcols)).enumerate() {
                        for j in 0..dcols {
                            dg[j] = dg[j] + gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                    self.acc(gain, Tensor::new(gv.shape().to_vec(), dg)?);
                }
            }
            Op::Embedding { table, ref ids } => {
                let tv = self.value_arc(table);
                let d = tv.cols();
                let mut dt = vec![S::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (o, &gv) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o = *o + gv;
                    }
                }
                self.acc(table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::Rope {
                x,
                ref cos_sin,
                pairs_per_head,
            } => {
                let mut d = g.into_data();
                let width = self.value(x).cols();
                rotate(&mut d, width, pairs_per_head * 2, cos_sin, true);
                let shape = self.value(x).shape().to_vec();
                self.acc(x, Tensor::new(shape, d)?);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                ref probs,
            } => self.attention_backward(q, k, v, shape, probs, &g, scope)?,
            Op::CrossEntropy {
                logits,
                ref targets,
                ref rows,
                ref probs,
            } => {
                let lv = self.value_arc(logits);
                let vocab = lv.cols();
                let mut d = vec![S::zero(); lv.len()];
                let w = g.data()[0] / S::of_usize(rows.len());
                for (n, &r) in rows.iter().enumerate() {
                    let pr = &probs[n * vocab..(n + 1) * vocab];
                    let dr = &mut d[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        dr[j] = pr[j] * w;
                    }
                    dr[targets[r]] = dr[targets[r]] - w;
                }
                self.acc(logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::GatherRows(x, ref idx) => {
                let xv = self.value_arc(x);
                let c = xv.cols();
                let mut d = vec![S::zero(); xv.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    let row = &mut d[dst * c..(dst + 1) * c];
                    for (o, &gv) in row.iter_mut().zip(&g.data()[src * c..(src + 1) * c]) {
                        *o = *o + gv;
                    }
                }
                self.acc(x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::ScatterRows(ref parts) => {
                let c = g.cols();
                for (p, idx) in parts {
                    if !self.rg(*p) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(idx.len() * c);
                    for &r in idx {
                        d.extend_from_slice(g.row(r));
                    }
                    let shape = self.value(*p).shape().to_vec();
                    self.acc(*p, Tensor::new(shape, d)?);
                }
            }
            Op::GatherCols(x, ref idx) => {
                let xv = self.value_arc(x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut d = vec![S::zero(); xv.len()];
                let k = idx.len();
                for row in 0..r {
                    for (j, &col) in idx.iter().enumerate() {
                        d[row * c + col] = d[row * c + col] + g.data()[row * k + j];
                    }
                }
                self.acc(x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::ScatterCols(x, ref idx) => {
                let total = g.cols();
                let r = g.rows();
                let mut d = Vec::with_capacity(r * idx.len());
                for row in 0..r {
                    d.extend(idx.iter().map(|&c| g.data()[row * total + c]));
                }
                let shape = self.value(x).shape().to_vec();
                self.acc(x, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[S],
        g: &Tensor<S>,
        scope: Scope,
    ) -> Result<()> {
        let AttnShape {
            batch,
            seq,
            heads,
            d_head,
        } = shape;
        let width = heads * d_head;
        let (qr, kr, vr) = (self.rg(q), self.rg(k), self.rg(v));
        let (qv, kv, vv) = (self.value_arc(q), self.value_arc(k), self.value_arc(v));
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let scale = S::one() / S::of_usize(d_head).sqrt();
        let n = batch * seq * width;
        let mut dq = if qr { vec![S::zero(); n] } else { Vec::new() };
        let mut dk = if kr { vec![S::zero(); n] } else { Vec::new() };
        let mut dv = if vr { vec![S::zero(); n] } else { Vec::new() };
        let mut dp = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let off_t = (b * seq + t) * width + h * d_head;
                    let grow = &gd[off_t..off_t + d_head];
                    let prow = &probs[pbase + t * seq..pbase + t * seq + t + 1];
                    if vr {
                        for j in 0..=t {
                            let off_j = (b * seq + j) * width + h * d_head;
                            let p = prow[j];
                            for c in 0..d_head {
                                dv[off_j + c] = dv[off_j + c] + p * grow[c];
                            }
                        }
                    }
                    if !(qr || kr) {
                        continue;
                    }
                    for j in 0..=t {
                        let off_j = (b * seq + j) * width + h * d_head;
                        dp[j] = dot(grow, &vd[off_j..off_j + d_head]);
                    }
                    let s: S = (0..=t).map(|j| dp[j] * prow[j]).sum();
                    for j in 0..=t {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let off_j = (b * seq + j) * width + h * d_head;
                        if qr {
                            for c in 0..d_head {
                                dq[off_t + c] = dq[off_t + c] + ds * kd[off_j + c];
                            }
                        }
                        if kr {
                            for c in 0..d_head {
                                dk[off_j + c] = dk[off_j + c] + ds * qd[off_t + c];
                            }
                        }
                    }
                }
            }
        }
        let pairs = (batch * heads * seq * (seq + 1) / 2) as u64;
        let unit = pairs * 2 * d_head as u64;
        let mut products = 0;
        if qr || kr {
            products += 1;
        }
        for live in [qr, kr, vr] {
            if live {
                products += 1;
            }
        }
        self.flops
            .add(scope.layer, scope.path(LinearMode::BwdInput), products * unit);
        let shp = vec![batch * seq, width];
        if qr {
            self.acc(q, Tensor::new(shp.clone(), dq)?);
        }
        if kr {
            self.acc(k, Tensor::new(shp.clone(), dk)?);
        }
        if vr {
            self.acc(v, Tensor::new(shp, dv)?);
        }
        Ok(())
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// Stabilized softmax of one row. Returns `false` (and zeros the row) when
/// every entry is `−∞`.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) -> bool {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    if mx == S::neg_infinity() || mx.is_nan() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return false;
    }
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
    true
}

fn rotate<S: Scalar>(data: &mut [S], width: usize, d_head: usize, cos_sin: &[(S, S)], inverse: bool) {
    let pph = d_head / 2;
    for (r, row) in data.chunks_mut(width).enumerate() {
        let table = &cos_sin[r * pph..(r + 1) * pph];
        for head in row.chunks_mut(d_head) {
            for (i, &(c, s)) in table.iter().enumerate() {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                if inverse {
                    head[2 * i] = x0 * c + x1 * s;
                    head[2 * i + 1] = x1 * c - x0 * s;
                } else {
                    head[2 * i] = x0 * c - x1 * s;
                    head[2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Arc<Tensor<f64>> {
        Arc::new(Tensor::from_rows(rows))
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.at(1, 0), 1.0);
        assert!(v.at(1, 1) < 1e-300);
    }

    #[test]
    fn softmax_mask_gives_exact_zeros_and_degenerate_rows_warn() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::from_rows(&[&[0.0, ninf], &[ninf, ninf]]);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.warnings().len(), 1);
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[0.0, -100.0]]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).at(0, 0), 0.0);
        assert!(tape.value(y).at(0, 1).abs() < 1e-40);
    }

    #[test]
    fn rmsnorm_constant_and_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[2.0, 2.0, 2.0, 2.0], &[0.0, 0.0, 0.0, 0.0]]));
        let g = tape.constant(Arc::new(Tensor::full(&[4], 1.0)));
        let y = tape.rmsnorm(x, g, 0.0).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0; 4]);
        let y2 = tape.rmsnorm(x, g, 1e-6).unwrap();
        assert_eq!(tape.value(y2).row(1), &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[0.0; 4], &[100.0, 0.0, 0.0, 0.0]]));
        let l = tape.cross_entropy_masked(x, &[2, 0], &[true, false]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-14);
        let l2 = tape.cross_entropy_masked(x, &[2, 0], &[false, true]).unwrap();
        assert!(tape.value(l2).data()[0] < 1e-40);
        assert!(tape.cross_entropy_masked(x, &[0, 0], &[false, false]).is_err());
    }

    #[test]
    fn frozen_leaves_never_get_gradients() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let a = tape.param(Tensor::from_rows(&[&[1.0, 1.0]]));
        let y = tape.matmul(a, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(tape.vars_with_grad(), vec![a]);
    }

    #[test]
    fn scatter_rows_rejects_overlap() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[&[1.0]]));
        let b = tape.constant(t(&[&[2.0]]));
        assert!(tape.scatter_rows(&[(a, vec![0]), (b, vec![0])], 2).is_err());
        let ok = tape.scatter_rows(&[(a, vec![1]), (b, vec![0])], 2).unwrap();
        assert_eq!(tape.value(ok).data(), &[2.0, 1.0]);
    }

    #[test]
    fn matmul_counts_flops_in_scope() {
        let mut tape = Tape::<f64>::new();
        tape.set_scope(Some(3), Branch::Main);
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Arc::new(Tensor::zeros(&[3, 4])));
        let y = tape.matmul(a, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        use crate::flops::FlopPath;
        assert_eq!(tape.flops().get(Some(3), FlopPath::MainFwd), 48);
        assert_eq!(tape.flops().get(Some(3), FlopPath::MainBwdInput), 48);
        assert_eq!(tape.flops().get(Some(3), FlopPath::MainBwdWeight), 0);
    }
}
