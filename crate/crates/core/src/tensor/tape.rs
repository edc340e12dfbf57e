//! Wengert tape: eager forward evaluation with recorded ops, replayed in
//! reverse for exact gradients.
//!
//! A tape is a single-owner unit: one logical thread builds it, runs
//! `backward`, and drops it. Parameters are registered by name so gradients
//! come back as a name → tensor map.

use std::collections::BTreeMap;

use super::{DenseTensor, Mask, Result, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        a: TensorId,
    },
    Unary {
        kind: UnaryKind,
        a: TensorId,
    },
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
    },
    MaskedSoftmax {
        a: TensorId,
        mask: Option<Mask>,
    },
    Reduce {
        kind: ReduceKind,
        a: TensorId,
        axis: usize,
        mask: Option<Mask>,
        /// Per output slice: argmax flat index (max) or unmasked count (mean/sum).
        aux: Vec<usize>,
    },
    ConcatLast {
        a: TensorId,
        b: TensorId,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    Lookup {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// Row gather with zero rows for `None` entries (window padding).
    GatherRows {
        a: TensorId,
        idx: Vec<Option<usize>>,
    },
}

struct Node {
    op: Op,
    value: DenseTensor,
    needs_grad: bool,
}

/// Reverse-mode differentiation record. Nodes are appended in topological
/// order by construction; `backward` visits each exactly once, in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, TensorId)>,
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if any gradient flowed to it.
    pub fn get(&self, id: TensorId) -> Option<&DenseTensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradients for every named parameter; leaves off every path to the
    /// loss get a zero tensor of the right shape.
    pub fn into_named(mut self, tape: &Tape) -> BTreeMap<String, DenseTensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &tape.params {
            let grad = self.grads[id.0].take().unwrap_or_else(|| {
                let (r, c) = tape.value(*id).dims2().expect("params are rank-2");
                DenseTensor::zeros(r, c)
            });
            out.insert(name.clone(), grad);
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &DenseTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: DenseTensor, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Input tensor that does not receive gradients.
    pub fn constant(&mut self, value: DenseTensor) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.constant(DenseTensor::scalar(value))
    }

    /// Differentiable leaf without a name (test programs, probes).
    pub fn leaf(&mut self, value: DenseTensor) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    /// Named differentiable leaf; the name keys the gradient map.
    pub fn param(&mut self, name: &str, value: DenseTensor) -> Result<TensorId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(TensorError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let id = self.push(Op::Leaf, value, true);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.params.iter().map(|(n, id)| (n.as_str(), *id))
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// C = A·B for A m×k, B k×n. Gradients: dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        matmul_into(da, db, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Matmul { a, b },
            DenseTensor::new(vec![m, n], out)?,
            needs,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::Transpose { a },
            DenseTensor::new(vec![n, m], out)?,
            needs,
        ))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: TensorId) -> Result<TensorId> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        let data = src
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sqrt => x.sqrt(),
            })
            .collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Unary { kind, a }, DenseTensor::new(shape, data)?, needs))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Relu, a)
    }

    /// Elementwise binary op with 2-D broadcasting: each axis must match or
    /// be 1 on one side. Gradients are summed over broadcast axes.
    pub fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (or, oc) = broadcast2(kind_name(kind), (ar, ac), (br, bc))?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; or * oc];
        for i in 0..or {
            for j in 0..oc {
                let x = da[(i % ar) * ac + (j % ac)];
                let y = db[(i % br) * bc + (j % bc)];
                out[i * oc + j] = match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                };
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Binary { kind, a, b },
            DenseTensor::new(vec![or, oc], out)?,
            needs,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// x + c for a plain constant c.
    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    /// c·x for a plain constant c.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    /// Row-wise softmax over unmasked entries; masked positions output
    /// exactly 0. Row max is subtracted before exponentiation.
    pub fn masked_softmax(&mut self, a: TensorId, mask: Option<&Mask>) -> Result<TensorId> {
        let (m, n) = self.value(a).dims2()?;
        if let Some(mk) = mask {
            if mk.shape() != self.value(a).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: self.value(a).shape().to_vec(),
                    rhs: mk.shape().to_vec(),
                });
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let live = |j: usize| mask.map_or(true, |mk| mk.data()[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if live(j) {
                    max = max.max(row[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if live(j) {
                    out[i * n + j] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::MaskedSoftmax {
                a,
                mask: mask.cloned(),
            },
            DenseTensor::new(vec![m, n], out)?,
            needs,
        ))
    }

    /// Reduction over one axis of a rank-2 tensor, restricted to unmasked
    /// entries. Axis 0 yields 1×n, axis 1 yields m×1. Max ties break to the
    /// lowest index; max backward routes the gradient to that single entry.
    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        a: TensorId,
        axis: usize,
        mask: Option<&Mask>,
    ) -> Result<TensorId> {
        let (m, n) = self.value(a).dims2()?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, rank: 2 });
        }
        if let Some(mk) = mask {
            if mk.shape() != self.value(a).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "reduce",
                    lhs: self.value(a).shape().to_vec(),
                    rhs: mk.shape().to_vec(),
                });
            }
        }
        let src = self.value(a).data();
        let (slices, slice_len) = if axis == 0 { (n, m) } else { (m, n) };
        let flat = |slice: usize, k: usize| {
            if axis == 0 {
                k * n + slice
            } else {
                slice * n + k
            }
        };
        let mut out = vec![0.0; slices];
        let mut aux = vec![0usize; slices];
        for s in 0..slices {
            let mut count = 0usize;
            let mut acc = 0.0;
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0usize;
            for k in 0..slice_len {
                let idx = flat(s, k);
                if mask.map_or(true, |mk| mk.data()[idx]) {
                    count += 1;
                    acc += src[idx];
                    if src[idx] > best {
                        best = src[idx];
                        best_at = idx;
                    }
                }
            }
            if count == 0 {
                return Err(TensorError::DegenerateAxis { axis, slice: s });
            }
            match kind {
                ReduceKind::Max => {
                    out[s] = best;
                    aux[s] = best_at;
                }
                ReduceKind::Mean => {
                    out[s] = acc / count as f64;
                    aux[s] = count;
                }
                ReduceKind::Sum => {
                    out[s] = acc;
                    aux[s] = count;
                }
            }
        }
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        let needs = self.needs(a);
        Ok(self.push(
            Op::Reduce {
                kind,
                a,
                axis,
                mask: mask.cloned(),
                aux,
            },
            DenseTensor::new(shape, out)?,
            needs,
        ))
    }

    pub fn reduce_sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let cols = self.reduce(ReduceKind::Sum, a, 0, None)?;
        self.reduce(ReduceKind::Sum, cols, 1, None)
    }

    /// Juxtaposition on the last axis: m×p ⊕ m×q → m×(p+q).
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        if ar != br {
            return Err(TensorError::ShapeMismatch {
                op: "concat_last",
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&da[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&db[i * bc..(i + 1) * bc]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::ConcatLast { a, b },
            DenseTensor::new(vec![ar, ac + bc], out)?,
            needs,
        ))
    }

    /// Stack rank-2 parts along axis 0; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let (r0, cols) = self.value(parts[0]).dims2()?;
        let mut rows = r0;
        for &p in &parts[1..] {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![r0, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            DenseTensor::new(vec![rows, cols], out)?,
            needs,
        ))
    }

    /// Row gather from an embedding table; duplicate ids accumulate on the
    /// backward scatter-add.
    pub fn lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.value(table).dims2()?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, size: v });
            }
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            DenseTensor::new(vec![ids.len(), d], out)?,
            needs,
        ))
    }

    /// Row gather from an intermediate; `None` produces a zero row. Used to
    /// build sliding windows with zero padding at sequence edges.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[Option<usize>]) -> Result<TensorId> {
        let (m, n) = self.value(a).dims2()?;
        for &i in idx.iter().flatten() {
            if i >= m {
                return Err(TensorError::IndexOutOfRange { index: i, size: m });
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; idx.len() * n];
        for (k, &i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out[k * n..(k + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            DenseTensor::new(vec![idx.len(), n], out)?,
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Deterministic: the same tape gives
    /// bitwise-identical gradients.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseTensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseTensor>], id: TensorId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (dst, src) in t.data_mut().iter_mut().zip(delta) {
                    *dst += src;
                }
            }
            None => {
                let shape = self.value(id).shape().to_vec();
                *slot = Some(DenseTensor::new(shape, delta.to_vec()).expect("shape/data agree"));
            }
        }
    }

    fn backward_node(&self, i: usize, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.needs(*a) {
                    // dA = dC·Bᵀ
                    let bd = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[r * n + j] * bd[c * n + j];
                            }
                            da[r * k + c] = acc;
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ·dC
                    let ad = self.value(*a).data();
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let av = ad[r * k + c];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[c * n + j] += av * gd[r * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = gd[c * m + r];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let da: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| {
                        gj * match kind {
                            UnaryKind::Tanh => 1.0 - y[j] * y[j],
                            UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                            UnaryKind::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y[j],
                            UnaryKind::Log => 1.0 / x[j],
                            UnaryKind::Sqrt => 0.5 / y[j],
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Binary { kind, a, b } => {
                let (ar, ac) = self.value(*a).dims2().unwrap();
                let (br, bc) = self.value(*b).dims2().unwrap();
                let (or, oc) = node.value.dims2().unwrap();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let mut da = vec![0.0; ar * ac];
                let mut db = vec![0.0; br * bc];
                for i2 in 0..or {
                    for j in 0..oc {
                        let gij = gd[i2 * oc + j];
                        let ia = (i2 % ar) * ac + (j % ac);
                        let ib = (i2 % br) * bc + (j % bc);
                        match kind {
                            BinaryKind::Add => {
                                da[ia] += gij;
                                db[ib] += gij;
                            }
                            BinaryKind::Sub => {
                                da[ia] += gij;
                                db[ib] -= gij;
                            }
                            BinaryKind::Mul => {
                                da[ia] += gij * bd[ib];
                                db[ib] += gij * ad[ia];
                            }
                            BinaryKind::Div => {
                                da[ia] += gij / bd[ib];
                                db[ib] -= gij * ad[ia] / (bd[ib] * bd[ib]);
                            }
                        }
                    }
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                let (m, n) = node.value.dims2().unwrap();
                let y = node.value.data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let live = |j: usize| mask.as_ref().map_or(true, |mk| mk.data()[r * n + j]);
                    let mut dot = 0.0;
                    for j in 0..n {
                        if live(j) {
                            dot += gd[r * n + j] * y[r * n + j];
                        }
                    }
                    for j in 0..n {
                        if live(j) {
                            da[r * n + j] = y[r * n + j] * (gd[r * n + j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Reduce {
                kind,
                a,
                axis,
                mask,
                aux,
            } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let (slices, slice_len) = if *axis == 0 { (n, m) } else { (m, n) };
                let flat = |slice: usize, k: usize| {
                    if *axis == 0 {
                        k * n + slice
                    } else {
                        slice * n + k
                    }
                };
                let mut da = vec![0.0; m * n];
                for s in 0..slices {
                    let gs = gd[s];
                    match kind {
                        ReduceKind::Max => da[aux[s]] += gs,
                        ReduceKind::Mean => {
                            let w = gs / aux[s] as f64;
                            for k in 0..slice_len {
                                let idx = flat(s, k);
                                if mask.as_ref().map_or(true, |mk| mk.data()[idx]) {
                                    da[idx] += w;
                                }
                            }
                        }
                        ReduceKind::Sum => {
                            for k in 0..slice_len {
                                let idx = flat(s, k);
                                if mask.as_ref().map_or(true, |mk| mk.data()[idx]) {
                                    da[idx] += gs;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::ConcatLast { a, b } => {
                let (ar, ac) = self.value(*a).dims2().unwrap();
                let (_, bc) = self.value(*b).dims2().unwrap();
                let oc = ac + bc;
                if self.needs(*a) {
                    let mut da = vec![0.0; ar * ac];
                    for r in 0..ar {
                        da[r * ac..(r + 1) * ac].copy_from_slice(&gd[r * oc..r * oc + ac]);
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; ar * bc];
                    for r in 0..ar {
                        db[r * bc..(r + 1) * bc]
                            .copy_from_slice(&gd[r * oc + ac..(r + 1) * oc]);
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0usize;
                for &p in parts {
                    let (r, c) = self.value(p).dims2().unwrap();
                    let len = r * c;
                    if self.needs(p) {
                        self.accumulate(grads, p, &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Lookup { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let mut dt = vec![0.0; v * d];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[k * d + j];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::GatherRows { a, idx } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut da = vec![0.0; m * n];
                for (k, &i2) in idx.iter().enumerate() {
                    if let Some(i2) = i2 {
                        for j in 0..n {
                            da[i2 * n + j] += gd[k * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
        }
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

fn broadcast2(
    op: &'static str,
    (ar, ac): (usize, usize),
    (br, bc): (usize, usize),
) -> Result<(usize, usize)> {
    let rows = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        });
    };
    let cols = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        });
    };
    Ok((rows, cols))
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}
