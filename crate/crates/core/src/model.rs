//! Small decoder-only transformer with pluggable memory and masking.
//!
//! Pre-norm blocks with RMS normalization, SiLU-gated feed-forward, rotary
//! positions on queries/keys, and tied input/output embeddings. Attention
//! accepts an arbitrary boolean mask plus an external per-layer KV prefix, so
//! the same forward serves full attention, KV-cached gist memory, and
//! recurrent (re-fed hidden state) memory.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{AttentionMask, Graph, TensorId};
use crate::rng::Rng;
use crate::tensor::TensorData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_position: usize,
    /// Learned always-visible prefix tokens, kept in memory for all segments.
    pub sink_count: usize,
    /// Distinct gist embeddings per within-segment slot; 1 = one shared vector.
    pub gist_slots: usize,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            layers: 4,
            heads: 4,
            model_dim: 128,
            ffn_dim: 256,
            max_position: 4096,
            sink_count: 4,
            gist_slots: 1,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 {
            return Err(invalid("vocab_size, layers, heads must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(invalid(alloc::format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim,
                self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid("head_dim must be even for rotary embeddings"));
        }
        if self.gist_slots == 0 {
            return Err(invalid("gist_slots must be at least 1"));
        }
        if self.max_position == 0 {
            return Err(invalid("max_position must be positive"));
        }
        Ok(())
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_gain: TensorData,
    pub wq: TensorData,
    pub wk: TensorData,
    pub wv: TensorData,
    pub wo: TensorData,
    pub mlp_gain: TensorData,
    pub wg: TensorData,
    pub wu: TensorData,
    pub wd: TensorData,
}

impl LayerParams {
    pub fn init(d: usize, ffn: usize, layers: usize, rng: &mut Rng) -> Self {
        let std = 0.02f32;
        let out_std = std / libm::sqrtf((2 * layers) as f32);
        let ones = |n: usize| TensorData::new([n], alloc::vec![1.0; n]).expect("shape");
        let mat = |r: usize, c: usize, s: f32, rng: &mut Rng| {
            TensorData::new([r, c], rng.normal_vec(r * c, s)).expect("shape")
        };
        Self {
            attn_gain: ones(d),
            wq: mat(d, d, std, rng),
            wk: mat(d, d, std, rng),
            wv: mat(d, d, std, rng),
            wo: mat(d, d, out_std, rng),
            mlp_gain: ones(d),
            wg: mat(d, ffn, std, rng),
            wu: mat(d, ffn, std, rng),
            wd: mat(ffn, d, out_std, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &TensorData)) {
        for (name, t) in [
            ("attn_gain", &self.attn_gain),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_gain", &self.mlp_gain),
            ("wg", &self.wg),
            ("wu", &self.wu),
            ("wd", &self.wd),
        ] {
            f(alloc::format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut TensorData)) {
        for (name, t) in [
            ("attn_gain", &mut self.attn_gain),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_gain", &mut self.mlp_gain),
            ("wg", &mut self.wg),
            ("wu", &mut self.wu),
            ("wd", &mut self.wd),
        ] {
            f(alloc::format!("{prefix}.{name}"), t);
        }
    }
}

/// Full parameter set of the main model. Output projection is the transpose
/// of `token_embed` (tied embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_embed: TensorData,
    pub gist_embed: TensorData,
    pub sink_embed: TensorData,
    pub layers: Vec<LayerParams>,
    pub final_gain: TensorData,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, 0x6d6f_64656c); // "model"
        let d = config.model_dim;
        let std = 0.02f32;
        Self {
            token_embed: TensorData::new(
                [config.vocab_size, d],
                rng.normal_vec(config.vocab_size * d, std),
            )
            .expect("shape"),
            gist_embed: TensorData::new([config.gist_slots, d], rng.normal_vec(config.gist_slots * d, std))
                .expect("shape"),
            sink_embed: TensorData::new(
                [config.sink_count.max(1), d],
                rng.normal_vec(config.sink_count.max(1) * d, std),
            )
            .expect("shape"),
            layers: (0..config.layers)
                .map(|_| LayerParams::init(d, config.ffn_dim, config.layers, &mut rng))
                .collect(),
            final_gain: TensorData::new([d], alloc::vec![1.0; d]).expect("shape"),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &TensorData)) {
        f(String::from("token_embed"), &self.token_embed);
        f(String::from("gist_embed"), &self.gist_embed);
        f(String::from("sink_embed"), &self.sink_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&alloc::format!("layers.{i}"), f);
        }
        f(String::from("final_gain"), &self.final_gain);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut TensorData)) {
        f(String::from("token_embed"), &mut self.token_embed);
        f(String::from("gist_embed"), &mut self.gist_embed);
        f(String::from("sink_embed"), &mut self.sink_embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&alloc::format!("layers.{i}"), f);
        }
        f(String::from("final_gain"), &mut self.final_gain);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Per-layer key/value cache entries, `[entries x (heads*head_dim)]` each.
/// Keys are stored post-rotary, so cached entries keep their baked positions.
#[derive(Debug, Clone, Copy)]
pub struct LayerKv {
    pub k: TensorId,
    pub v: TensorId,
}

/// Detached (plain data) form of [`LayerKv`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvData {
    pub k: TensorData,
    pub v: TensorData,
}

/// Parameter ids bound into one graph. Bind once per graph and reuse across
/// all segments processed in it.
pub struct BoundLayer {
    pub attn_gain: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub mlp_gain: TensorId,
    pub wg: TensorId,
    pub wu: TensorId,
    pub wd: TensorId,
}

pub struct BoundModel {
    pub token_embed: TensorId,
    pub gist_embed: TensorId,
    pub sink_embed: TensorId,
    pub layers: Vec<BoundLayer>,
    pub final_gain: TensorId,
}

impl BoundModel {
    /// Lease parameters into `graph`. Trainable bindings receive gradients;
    /// frozen bindings are constants (reference/eval forwards).
    pub fn bind(graph: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let mut put = |t: &TensorData| {
            if trainable {
                graph.param(t)
            } else {
                graph.leaf(t.clone())
            }
        };
        BoundModel {
            token_embed: put(&params.token_embed),
            gist_embed: put(&params.gist_embed),
            sink_embed: put(&params.sink_embed),
            layers: params
                .layers
                .iter()
                .map(|l| BoundLayer {
                    attn_gain: put(&l.attn_gain),
                    wq: put(&l.wq),
                    wk: put(&l.wk),
                    wv: put(&l.wv),
                    wo: put(&l.wo),
                    mlp_gain: put(&l.mlp_gain),
                    wg: put(&l.wg),
                    wu: put(&l.wu),
                    wd: put(&l.wd),
                })
                .collect(),
            final_gain: put(&params.final_gain),
        }
    }

    /// Ids in `visit` order, for reading gradients back out.
    pub fn ids(&self) -> Vec<TensorId> {
        let mut ids = alloc::vec![self.token_embed, self.gist_embed, self.sink_embed];
        for l in &self.layers {
            ids.extend([
                l.attn_gain, l.wq, l.wk, l.wv, l.wo, l.mlp_gain, l.wg, l.wu, l.wd,
            ]);
        }
        ids.push(self.final_gain);
        ids
    }
}

pub struct ForwardRequest<'a> {
    /// Input rows `[T x d]`, already embedded.
    pub embeds: TensorId,
    /// Stream position per input row; non-decreasing.
    pub positions: &'a [u32],
    /// Per-layer KV prefix the inputs may attend to.
    pub memory: Option<&'a [LayerKv]>,
    /// `[T x (memory_entries + T)]` boolean mask.
    pub mask: &'a Arc<AttentionMask>,
}

pub struct ForwardOutput {
    /// `[T x vocab]`, differentiable w.r.t. params and embeddings.
    pub logits: TensorId,
    /// KV for the `T` new inputs only (memory prefix not included).
    pub new_kv: Vec<LayerKv>,
    /// Final post-norm hidden states `[T x d]`; recurrent memory payload.
    pub last_hidden: TensorId,
}

/// One pre-norm transformer block over an existing graph.
///
/// Shared by the main model, the autoencoding decoder, and probe decoders.
/// Returns (block output, this block's new KV).
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    graph: &mut Graph,
    layer: &BoundLayer,
    x: TensorId,
    positions: &[u32],
    memory: Option<LayerKv>,
    mask: &Arc<AttentionMask>,
    heads: usize,
    rope_base: f32,
) -> Result<(TensorId, LayerKv)> {
    let normed = graph.rms_norm(x, layer.attn_gain)?;
    let q = graph.matmul(normed, layer.wq)?;
    let q = graph.rope(q, positions, heads, rope_base)?;
    let k = graph.matmul(normed, layer.wk)?;
    let k = graph.rope(k, positions, heads, rope_base)?;
    let v = graph.matmul(normed, layer.wv)?;
    let new_kv = LayerKv { k, v };
    let (k_all, v_all) = match memory {
        Some(mem) => (graph.concat_rows(mem.k, k)?, graph.concat_rows(mem.v, v)?),
        None => (k, v),
    };
    let attn = graph.attention(q, k_all, v_all, mask, heads)?;
    let attn_out = graph.matmul(attn, layer.wo)?;
    let x = graph.add(x, attn_out)?;

    let normed = graph.rms_norm(x, layer.mlp_gain)?;
    let gate = graph.matmul(normed, layer.wg)?;
    let gate = graph.silu(gate);
    let up = graph.matmul(normed, layer.wu)?;
    let h = graph.mul(gate, up)?;
    let down = graph.matmul(h, layer.wd)?;
    let x = graph.add(x, down)?;
    Ok((x, new_kv))
}

/// Full-model forward over one batch of input rows.
pub fn forward(
    graph: &mut Graph,
    config: &ModelConfig,
    bound: &BoundModel,
    req: &ForwardRequest<'_>,
) -> Result<ForwardOutput> {
    let t = graph.rows(req.embeds);
    if req.positions.len() != t {
        return Err(invalid(alloc::format!(
            "forward: {} positions for {t} input rows",
            req.positions.len()
        )));
    }
    // Non-decreasing: a fine-grained gist shares the position of the last
    // raw token it covers, so equal adjacent positions are legal.
    for w in req.positions.windows(2) {
        if w[1] < w[0] {
            return Err(invalid(alloc::format!(
                "forward: positions must be non-decreasing, got {} then {}",
                w[0],
                w[1]
            )));
        }
    }
    let mem_entries = match req.memory {
        Some(mem) => {
            if mem.len() != config.layers {
                return Err(invalid(alloc::format!(
                    "forward: memory covers {} layers, model has {}",
                    mem.len(),
                    config.layers
                )));
            }
            let m = graph.rows(mem[0].k);
            for (i, layer) in mem.iter().enumerate() {
                if graph.rows(layer.k) != m || graph.rows(layer.v) != m {
                    return Err(invalid(alloc::format!(
                        "forward: memory layer {i} entry count differs from layer 0"
                    )));
                }
            }
            m
        }
        None => 0,
    };
    if req.mask.queries() != t || req.mask.keys() != mem_entries + t {
        return Err(invalid(alloc::format!(
            "forward: mask {}x{} does not match {t} inputs over {mem_entries} memory entries",
            req.mask.queries(),
            req.mask.keys()
        )));
    }

    let mut x = req.embeds;
    let mut new_kv = Vec::with_capacity(config.layers);
    for (i, layer) in bound.layers.iter().enumerate() {
        let mem = req.memory.map(|m| m[i]);
        let (next, kv) = block_forward(
            graph,
            layer,
            x,
            req.positions,
            mem,
            req.mask,
            config.heads,
            config.rope_base,
        )?;
        x = next;
        new_kv.push(kv);
    }
    let last_hidden = graph.rms_norm(x, bound.final_gain)?;
    let logits = graph.matmul_nt(last_hidden, bound.token_embed)?;
    Ok(ForwardOutput {
        logits,
        new_kv,
        last_hidden,
    })
}

/// Reference implementations used by tests and the acceptance suite.
///
/// Kept deliberately naive and independent of the batched graph path.
pub mod reference {
    use super::*;

    /// O(T^2) per-element masked attention, from the definition: for every
    /// query, softmax over its allowed keys only, then a weighted value sum.
    pub fn attention_naive(
        q: &TensorData,
        k: &TensorData,
        v: &TensorData,
        mask: &AttentionMask,
        heads: usize,
    ) -> TensorData {
        let (t, d) = (q.rows(), q.cols());
        let m = k.rows();
        let hd = d / heads;
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let mut out = TensorData::zeros([t, d]);
        for h in 0..heads {
            for i in 0..t {
                let mut allowed: Vec<usize> = Vec::new();
                for j in 0..m {
                    if mask.allows(i, j) {
                        allowed.push(j);
                    }
                }
                let mut scores: Vec<f32> = Vec::with_capacity(allowed.len());
                for &j in &allowed {
                    let mut z = 0.0f32;
                    for c in 0..hd {
                        z += q.row(i)[h * hd + c] * k.row(j)[h * hd + c];
                    }
                    scores.push(z * scale);
                }
                let max = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut weights: Vec<f32> = scores.iter().map(|&z| libm::expf(z - max)).collect();
                let denom: f32 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= denom;
                }
                for (idx, &j) in allowed.iter().enumerate() {
                    for c in 0..hd {
                        out.row_mut(i)[h * hd + c] += weights[idx] * v.row(j)[h * hd + c];
                    }
                }
            }
        }
        out
    }
}
