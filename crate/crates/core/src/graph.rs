//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so the node vector is already a topological order and
//! `backward` is a single reverse sweep. Tensors that participate in autograd
//! are never mutated in place.
//!
//! The op set is exactly what a small decoder-only transformer needs: matmul,
//! row gather/concat, RMS norm, SiLU, rotary embedding, masked attention, row
//! softmax, and weighted cross-entropy. Attention masking adds -1e9 to
//! disallowed logits before the softmax.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::TensorData;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Boolean attention mask over `[query-count x (memory + query-count)]`.
///
/// Row `i` lists the keys query `i` may attend to. Within the query block the
/// mask must be lower-triangular or stricter, and every row must allow at
/// least one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != queries * keys {
            return Err(invalid("mask buffer does not match its dimensions"));
        }
        let mask = Self {
            queries,
            keys,
            allow,
        };
        mask.validate()?;
        Ok(mask)
    }

    /// Plain causal mask over an entry stream with `memory` always-visible
    /// prefix entries: entry `i` sees all memory plus stream entries `0..=i`.
    pub fn causal_with_memory(memory: usize, stream: usize) -> Self {
        let keys = memory + stream;
        let mut allow = vec![false; stream * keys];
        for i in 0..stream {
            let row = &mut allow[i * keys..(i + 1) * keys];
            for slot in row.iter_mut().take(memory + i + 1) {
                *slot = true;
            }
        }
        Self {
            queries: stream,
            keys,
            allow,
        }
    }

    fn validate(&self) -> Result<()> {
        let memory = self.keys.checked_sub(self.queries).ok_or_else(|| {
            invalid("mask has fewer keys than queries; query block must be self-inclusive")
        })?;
        for i in 0..self.queries {
            let row = self.row(i);
            if !row.iter().any(|&a| a) {
                return Err(invalid(alloc::format!("mask row {i} allows no keys")));
            }
            for j in (i + 1)..self.queries {
                if row[memory + j] {
                    return Err(invalid(alloc::format!(
                        "mask violates causality: query {i} sees future entry {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.keys..(i + 1) * self.keys]
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.keys + key]
    }
}

const MASK_NEG: f32 = -1e9;
const RMS_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    SumN(Vec<TensorId>),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    MatMul(TensorId, TensorId),
    /// `a[m x k] * b[n x k]^T`
    MatMulNT(TensorId, TensorId),
    GatherRows {
        x: TensorId,
        rows: Vec<u32>,
    },
    ConcatRows(TensorId, TensorId),
    RmsNorm {
        x: TensorId,
        gain: TensorId,
        inv_rms: Vec<f32>,
    },
    Silu(TensorId),
    Rope {
        x: TensorId,
        positions: Vec<u32>,
        heads: usize,
        base: f32,
    },
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        probs: Vec<f32>,
    },
    SoftmaxRows(TensorId),
    SumAll(TensorId),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
        weights: Vec<f32>,
        probs: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation graph; see module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() as u32 - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.index()]
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.node(*id).requires_grad)
    }

    /// Constant input: participates in forward only.
    pub fn leaf(&mut self, t: TensorData) -> TensorId {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push(shape, data, false, Op::Leaf)
    }

    /// Trainable input: gradient is accumulated during `backward`.
    pub fn param(&mut self, t: &TensorData) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.node(id).value
    }

    pub fn rows(&self, id: TensorId) -> usize {
        let shape = self.shape(id);
        shape[..shape.len() - 1].iter().product()
    }

    pub fn cols(&self, id: TensorId) -> usize {
        *self.shape(id).last().unwrap_or(&1)
    }

    pub fn to_tensor(&self, id: TensorId) -> TensorData {
        TensorData::new(self.shape(id).to_vec(), self.data(id).to_vec())
            .expect("node buffers are consistent")
    }

    pub fn scalar_value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.node(id).value.len(), 1);
        self.node(id).value[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.node(id).grad.as_deref()
    }

    fn expect_2d(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: shape.to_vec(),
                right: vec![],
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let value: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Add(a, b)))
    }

    /// Elementwise sum of same-shaped tensors (nonempty).
    pub fn sum_n(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        let first = *ids.first().ok_or_else(|| invalid("sum_n of no tensors"))?;
        let mut value = self.data(first).to_vec();
        for &id in &ids[1..] {
            if self.shape(id) != self.shape(first) {
                return Err(Error::ShapeMismatch {
                    op: "sum_n",
                    left: self.shape(first).to_vec(),
                    right: self.shape(id).to_vec(),
                });
            }
            for (acc, x) in value.iter_mut().zip(self.data(id)) {
                *acc += x;
            }
        }
        let rg = self.requires(ids);
        Ok(self.push(self.shape(first).to_vec(), value, rg, Op::SumN(ids.to_vec())))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let value: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, factor: f32) -> TensorId {
        let value: Vec<f32> = self.data(a).iter().map(|x| x * factor).collect();
        let rg = self.node(a).requires_grad;
        self.push(self.shape(a).to_vec(), value, rg, Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f32> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.node(a).requires_grad;
        self.push(self.shape(a).to_vec(), value, rg, Op::Silu(a))
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.expect_2d(a, "matmul")?;
        let (kb, n) = self.expect_2d(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let value = matmul_kernel(self.data(a), self.data(b), m, ka, n);
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a, b)))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.expect_2d(a, "matmul_nt")?;
        let (n, kb) = self.expect_2d(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.data(a), self.data(b));
        let mut value = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &av[i * ka..(i + 1) * ka];
            let out = &mut value[i * n..(i + 1) * n];
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = dot(arow, &bv[j * ka..(j + 1) * ka]);
            }
        }
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMulNT(a, b)))
    }

    /// Select rows of `x` (serves as both slicing and embedding lookup).
    pub fn gather_rows(&mut self, x: TensorId, rows: &[u32]) -> Result<TensorId> {
        let (n, d) = self.expect_2d(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n) {
            return Err(invalid(alloc::format!(
                "gather_rows: row {bad} out of range for {n} rows"
            )));
        }
        let xv = self.data(x);
        let mut value = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            value.extend_from_slice(&xv[r as usize * d..(r as usize + 1) * d]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![rows.len(), d],
            value,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, da) = self.expect_2d(a, "concat_rows")?;
        let (n, db) = self.expect_2d(b, "concat_rows")?;
        if da != db {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut value = Vec::with_capacity((m + n) * da);
        value.extend_from_slice(self.data(a));
        value.extend_from_slice(self.data(b));
        let rg = self.requires(&[a, b]);
        Ok(self.push(vec![m + n, da], value, rg, Op::ConcatRows(a, b)))
    }

    // ---- normalization and activations ----

    /// RMS norm over the trailing dimension with a learned gain.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let (rows, d) = self.expect_2d(x, "rms_norm")?;
        if self.shape(gain) != [d] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xv = self.data(x);
        let gv = self.data(gain);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut value = vec![0.0f32; rows * d];
        for i in 0..rows {
            let row = &xv[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / libm::sqrtf(ms + RMS_EPS);
            inv_rms.push(inv);
            let out = &mut value[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = row[j] * inv * gv[j];
            }
        }
        let rg = self.requires(&[x, gain]);
        Ok(self.push(vec![rows, d], value, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rotary position embedding applied per head (half-split layout).
    pub fn rope(
        &mut self,
        x: TensorId,
        positions: &[u32],
        heads: usize,
        base: f32,
    ) -> Result<TensorId> {
        let (rows, d) = self.expect_2d(x, "rope")?;
        if positions.len() != rows {
            return Err(invalid(alloc::format!(
                "rope: {} positions for {rows} rows",
                positions.len()
            )));
        }
        if d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(invalid("rope: head_dim must be even"));
        }
        let mut value = self.data(x).to_vec();
        rope_apply(&mut value, positions, rows, d, heads, base, false);
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![rows, d],
            value,
            rg,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                heads,
                base,
            },
        ))
    }

    /// Multi-head scaled dot-product attention under a boolean mask.
    ///
    /// `q` is `[T x d]`, `k`/`v` are `[M x d]` (memory entries first), and the
    /// mask is `[T x M]`. Disallowed logits receive -1e9 before the softmax.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        mask: &Arc<AttentionMask>,
        heads: usize,
    ) -> Result<TensorId> {
        let (t, d) = self.expect_2d(q, "attention")?;
        let (mk, dk) = self.expect_2d(k, "attention")?;
        let (mv, dv) = self.expect_2d(v, "attention")?;
        if dk != d || dv != d || mk != mv {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: self.shape(k).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        if mask.queries() != t || mask.keys() != mk {
            return Err(invalid(alloc::format!(
                "attention: mask {}x{} does not cover {t} queries over {mk} keys",
                mask.queries(),
                mask.keys()
            )));
        }
        if d % heads != 0 {
            return Err(invalid("attention: model dim not divisible by heads"));
        }
        let hd = d / heads;
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; heads * t * mk];
        let mut value = vec![0.0f32; t * d];
        let mut logits = vec![0.0f32; mk];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..t {
                let qrow = &qv[i * d + off..i * d + off + hd];
                let mask_row = mask.row(i);
                let mut max = f32::NEG_INFINITY;
                for j in 0..mk {
                    let z = if mask_row[j] {
                        dot(qrow, &kv[j * d + off..j * d + off + hd]) * scale
                    } else {
                        MASK_NEG
                    };
                    logits[j] = z;
                    if z > max {
                        max = z;
                    }
                }
                let mut denom = 0.0f32;
                let prow = &mut probs[(h * t + i) * mk..(h * t + i + 1) * mk];
                for j in 0..mk {
                    let e = libm::expf(logits[j] - max);
                    prow[j] = e;
                    denom += e;
                }
                let inv = 1.0 / denom;
                let out = &mut value[i * d + off..i * d + off + hd];
                for j in 0..mk {
                    let p = prow[j] * inv;
                    prow[j] = p;
                    if p != 0.0 {
                        let vrow = &vv[j * d + off..j * d + off + hd];
                        for (o, vx) in out.iter_mut().zip(vrow) {
                            *o += p * vx;
                        }
                    }
                }
            }
        }
        let rg = self.requires(&[q, k, v]);
        Ok(self.push(
            vec![t, d],
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Row-stable softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let rows = self.data(x).len() / n.max(1);
        let mut value = self.data(x).to_vec();
        for i in 0..rows {
            softmax_row(&mut value[i * n..(i + 1) * n]);
        }
        let rg = self.node(x).requires_grad;
        self.push(shape, value, rg, Op::SoftmaxRows(x))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total: f32 = self.data(x).iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![total], rg, Op::SumAll(x))
    }

    /// Weighted token-level negative log-likelihood.
    ///
    /// Returns `sum_i weights[i] * (-log softmax(logits_i)[targets[i]])` as a
    /// scalar node. Pass `1/T` weights for the plain mean.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        weights: &[f32],
    ) -> Result<TensorId> {
        let (t, v) = self.expect_2d(logits, "cross_entropy")?;
        if targets.len() != t || weights.len() != t {
            return Err(invalid(alloc::format!(
                "cross_entropy: {t} logit rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&tok| tok as usize >= v) {
            return Err(invalid(alloc::format!(
                "cross_entropy: target {bad} out of vocabulary {v}"
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(invalid("cross_entropy: negative weight"));
        }
        let zv = self.data(logits);
        let mut probs = vec![0.0f32; t * v];
        let mut loss = 0.0f64;
        for i in 0..t {
            let row = &zv[i * v..(i + 1) * v];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0f64;
            for &z in row {
                denom += libm::exp((z - max) as f64);
            }
            let lse = max as f64 + libm::log(denom);
            let prow = &mut probs[i * v..(i + 1) * v];
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = libm::exp(z as f64 - lse) as f32;
            }
            loss += weights[i] as f64 * (lse - row[targets[i] as usize] as f64);
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss as f32],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Visits each node exactly once in
    /// reverse topological order; gradients accumulate by addition.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.node(root).value.len() != 1 {
            return Err(invalid("backward requires a scalar root"));
        }
        self.nodes[root.index()].grad = Some(vec![1.0]);
        for idx in (0..=root.index()).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.take().expect("checked above");
            let updates = self.input_grads(idx, &grad);
            self.nodes[idx].grad = Some(grad);
            for (id, delta) in updates {
                let node = &mut self.nodes[id.index()];
                let acc = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.len()]);
                for (slot, x) in acc.iter_mut().zip(delta) {
                    *slot += x;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    #[allow(clippy::needless_range_loop)]
    fn input_grads(&self, idx: usize, g: &[f32]) -> Vec<(TensorId, Vec<f32>)> {
        let mut out: Vec<(TensorId, Vec<f32>)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        out.push((id, g.to_vec()));
                    }
                }
            }
            Op::SumN(ids) => {
                for &id in ids {
                    if self.wants(id) {
                        out.push((id, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.data(*b);
                    out.push((*a, g.iter().zip(bv).map(|(&gx, &x)| gx * x).collect()));
                }
                if self.wants(*b) {
                    let av = self.data(*a);
                    out.push((*b, g.iter().zip(av).map(|(&gx, &x)| gx * x).collect()));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|&gx| gx * c).collect()));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    // dA = dC * B^T
                    let bv = self.data(*b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &mut da[i * k..(i + 1) * k];
                        for (p, slot) in arow.iter_mut().enumerate() {
                            *slot = dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    // dB = A^T * dC
                    let av = self.data(*a);
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                let brow = &mut db[p * n..(p + 1) * n];
                                for (slot, &gx) in brow.iter_mut().zip(grow) {
                                    *slot += aip * gx;
                                }
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.wants(*a) {
                    // dA = dC * B
                    let bv = self.data(*b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &mut da[i * k..(i + 1) * k];
                        for (j, &gx) in grow.iter().enumerate() {
                            if gx != 0.0 {
                                let brow = &bv[j * k..(j + 1) * k];
                                for (slot, &bx) in arow.iter_mut().zip(brow) {
                                    *slot += gx * bx;
                                }
                            }
                        }
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    // dB = dC^T * A
                    let av = self.data(*a);
                    let mut db = vec![0.0f32; n * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (j, &gx) in grow.iter().enumerate() {
                            if gx != 0.0 {
                                let brow = &mut db[j * k..(j + 1) * k];
                                for (slot, &ax) in brow.iter_mut().zip(arow) {
                                    *slot += gx * ax;
                                }
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let d = self.shape(*x)[1];
                    let mut dx = vec![0.0f32; self.data(*x).len()];
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * d..(i + 1) * d];
                        let dst = &mut dx[r as usize * d..(r as usize + 1) * d];
                        for (slot, &gx) in dst.iter_mut().zip(src) {
                            *slot += gx;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.data(*a).len();
                if self.wants(*a) {
                    out.push((*a, g[..split].to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g[split..].to_vec()));
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (rows, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.data(*x);
                let gv = self.data(*gain);
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; rows * d];
                    for i in 0..rows {
                        let xrow = &xv[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let s = inv_rms[i];
                        let mut inner = 0.0f32;
                        for j in 0..d {
                            inner += grow[j] * gv[j] * xrow[j];
                        }
                        let coeff = s * s * s * inner / d as f32;
                        let drow = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            drow[j] = s * gv[j] * grow[j] - coeff * xrow[j];
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0f32; d];
                    for i in 0..rows {
                        let xrow = &xv[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let s = inv_rms[i];
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j] * s;
                        }
                    }
                    out.push((*gain, dg));
                }
            }
            Op::Silu(a) => {
                if self.wants(*a) {
                    let av = self.data(*a);
                    let dx = g
                        .iter()
                        .zip(av)
                        .map(|(&gx, &x)| {
                            let s = sigmoid(x);
                            gx * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    out.push((*a, dx));
                }
            }
            Op::Rope {
                x,
                positions,
                heads,
                base,
            } => {
                if self.wants(*x) {
                    let (rows, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = g.to_vec();
                    // The inverse of a rotation is the rotation by -angle.
                    rope_apply(&mut dx, positions, rows, d, *heads, *base, true);
                    out.push((*x, dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let mk = self.shape(*k)[0];
                let hd = d / heads;
                let scale = 1.0 / libm::sqrtf(hd as f32);
                let qv = self.data(*q);
                let kv = self.data(*k);
                let vv = self.data(*v);
                let mut dq = vec![0.0f32; t * d];
                let mut dk = vec![0.0f32; mk * d];
                let mut dv = vec![0.0f32; mk * d];
                let mut dlogit = vec![0.0f32; mk];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * mk..(h * t + i + 1) * mk];
                        let grow = &g[i * d + off..i * d + off + hd];
                        let mut pdp = 0.0f32;
                        for j in 0..mk {
                            if prow[j] != 0.0 {
                                let dp = dot(grow, &vv[j * d + off..j * d + off + hd]);
                                dlogit[j] = dp;
                                pdp += prow[j] * dp;
                            } else {
                                dlogit[j] = 0.0;
                            }
                        }
                        let qrow = &qv[i * d + off..i * d + off + hd];
                        let dqrow = &mut dq[i * d + off..i * d + off + hd];
                        for j in 0..mk {
                            let p = prow[j];
                            if p == 0.0 {
                                continue;
                            }
                            let dl = p * (dlogit[j] - pdp) * scale;
                            let krow = &kv[j * d + off..j * d + off + hd];
                            for (slot, &kx) in dqrow.iter_mut().zip(krow) {
                                *slot += dl * kx;
                            }
                            let dkrow = &mut dk[j * d + off..j * d + off + hd];
                            for (slot, &qx) in dkrow.iter_mut().zip(qrow) {
                                *slot += dl * qx;
                            }
                            let dvrow = &mut dv[j * d + off..j * d + off + hd];
                            for (slot, &gx) in dvrow.iter_mut().zip(grow) {
                                *slot += p * gx;
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    out.push((*q, dq));
                }
                if self.wants(*k) {
                    out.push((*k, dk));
                }
                if self.wants(*v) {
                    out.push((*v, dv));
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let outv = &self.nodes[idx].value;
                    let n = *self.nodes[idx].shape.last().unwrap_or(&1);
                    let rows = outv.len() / n.max(1);
                    let mut dx = vec![0.0f32; outv.len()];
                    for i in 0..rows {
                        let p = &outv[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let inner: f32 = p.iter().zip(grow).map(|(&px, &gx)| px * gx).sum();
                        let drow = &mut dx[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = p[j] * (grow[j] - inner);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    out.push((*x, vec![g[0]; self.data(*x).len()]));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let v = self.shape(*logits)[1];
                    let gx = g[0];
                    let mut dz = vec![0.0f32; self.data(*logits).len()];
                    for (i, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let prow = &probs[i * v..(i + 1) * v];
                        let drow = &mut dz[i * v..(i + 1) * v];
                        for j in 0..v {
                            drow[j] = gx * w * prow[j];
                        }
                        drow[tgt as usize] -= gx * w;
                    }
                    out.push((*logits, dz));
                }
            }
        }
        out
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (slot, &bx) in crow.iter_mut().zip(brow) {
                    *slot += aip * bx;
                }
            }
        }
    }
    c
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        denom += *v;
    }
    let inv = 1.0 / denom;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place rotary embedding over `[rows x d]` split into `heads` heads.
/// Each head vector is rotated as two halves (GPT-NeoX layout).
fn rope_apply(
    data: &mut [f32],
    positions: &[u32],
    rows: usize,
    d: usize,
    heads: usize,
    base: f32,
    inverse: bool,
) {
    let hd = d / heads;
    let half = hd / 2;
    let mut freqs = Vec::with_capacity(half);
    for p in 0..half {
        freqs.push(libm::pow(base as f64, -2.0 * p as f64 / hd as f64));
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    for (i, &pos) in positions.iter().enumerate().take(rows) {
        for h in 0..heads {
            let off = i * d + h * hd;
            for p in 0..half {
                let angle = sign * pos as f64 * freqs[p];
                let (c, s) = (libm::cos(angle) as f32, libm::sin(angle) as f32);
                let x1 = data[off + p];
                let x2 = data[off + half + p];
                data[off + p] = x1 * c - x2 * s;
                data[off + half + p] = x1 * s + x2 * c;
            }
        }
    }
}
