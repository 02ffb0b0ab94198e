//! Training losses and the optimization loop.
//!
//! Three ingredients combine per training sequence:
//!
//! 1. a weighted LM loss over the compressed forward's next-token logits;
//! 2. an optional fine-grained autoencoding (AE) loss: a one-block decoder
//!    reconstructs each gist's covered snippet from the gist representation,
//!    prompted by a ratio-specific `[ae]_r` token;
//! 3. optional segment-wise token importance estimation (TIE): a frozen
//!    full-attention reference model scores how much each token relies on
//!    cross-segment context, and the LM loss is reweighted accordingly.
//!
//! The total objective is `L_lm + lambda_ae * L_ae`, stepped with Adam using
//! decoupled weight decay under a warmup + cosine schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gist::{
    compress_document, segment_input, CompressionSpec, GistTrace, MemoryKind, SegmentTrace,
};
use crate::graph::{AttentionMask, Graph, TensorId};
use crate::model::{
    block_forward, BoundLayer, BoundModel, LayerKv, LayerParams, ModelConfig, ModelParams,
};
use crate::rng::Rng;
use crate::tensor::TensorData;

// ---------------------------------------------------------------------------
// Gist decoder (AE loss and reconstruction probes)
// ---------------------------------------------------------------------------

/// Decoder that reconstructs snippets from gist representations.
///
/// The autoencoding decoder is always a single block; probe decoders may be
/// full-depth copies. The output projection is tied to the main model's token
/// embeddings, and `[ae]_r` rows prompt reconstruction of `r` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GistDecoder {
    pub blocks: Vec<LayerParams>,
    pub final_gain: TensorData,
    /// One learned `[ae]_r` embedding per supported ratio.
    pub ae_embed: TensorData,
    pub ratios: Vec<usize>,
}

impl GistDecoder {
    /// The training-time AE decoder: exactly one block.
    pub fn ae(config: &ModelConfig, ratios: &[usize], seed: u64) -> Self {
        Self::with_depth(config, ratios, 1, seed)
    }

    /// Probe decoder of arbitrary depth (1 = weak, `config.layers` = strong).
    pub fn with_depth(config: &ModelConfig, ratios: &[usize], depth: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, 0x6465_636f); // "deco"
        let d = config.model_dim;
        Self {
            blocks: (0..depth)
                .map(|_| LayerParams::init(d, config.ffn_dim, depth, &mut rng))
                .collect(),
            final_gain: TensorData::new([d], vec![1.0; d]).expect("shape"),
            ae_embed: TensorData::new([ratios.len(), d], rng.normal_vec(ratios.len() * d, 0.02))
                .expect("shape"),
            ratios: ratios.to_vec(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Row of `[ae]_r` for a ratio; missing ratios are rejected.
    pub fn ae_row(&self, ratio: usize) -> Result<usize> {
        self.ratios
            .iter()
            .position(|&r| r == ratio)
            .ok_or_else(|| invalid(alloc::format!("no [ae] embedding for ratio {ratio}")))
    }

    pub fn visit(&self, f: &mut impl FnMut(alloc::string::String, &TensorData)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&alloc::format!("ae.blocks.{i}"), f);
        }
        f(alloc::string::String::from("ae.final_gain"), &self.final_gain);
        f(alloc::string::String::from("ae.ae_embed"), &self.ae_embed);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(alloc::string::String, &mut TensorData)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&alloc::format!("ae.blocks.{i}"), f);
        }
        f(alloc::string::String::from("ae.final_gain"), &mut self.final_gain);
        f(alloc::string::String::from("ae.ae_embed"), &mut self.ae_embed);
    }
}

pub struct BoundDecoder {
    pub blocks: Vec<BoundLayer>,
    pub final_gain: TensorId,
    pub ae_embed: TensorId,
    pub ratios: Vec<usize>,
}

impl BoundDecoder {
    pub fn bind(graph: &mut Graph, dec: &GistDecoder, trainable: bool) -> Self {
        let mut put = |t: &TensorData| {
            if trainable {
                graph.param(t)
            } else {
                graph.leaf(t.clone())
            }
        };
        BoundDecoder {
            blocks: dec
                .blocks
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
            final_gain: put(&dec.final_gain),
            ae_embed: put(&dec.ae_embed),
            ratios: dec.ratios.clone(),
        }
    }

    pub fn ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for l in &self.blocks {
            ids.extend([
                l.attn_gain, l.wq, l.wk, l.wv, l.wo, l.mlp_gain, l.wg, l.wu, l.wd,
            ]);
        }
        ids.push(self.final_gain);
        ids.push(self.ae_embed);
        ids
    }
}

/// How one gist's compressed representation conditions the decoder.
pub enum GistConditioning {
    /// Per-decoder-block prefilled (k, v) cache rows, one entry each, taken
    /// from the main model's matching layers (the last `depth` layers).
    KvPrefill { k: Vec<TensorId>, v: Vec<TensorId> },
    /// The gist's final hidden state becomes the first input embedding.
    HiddenRow(TensorId),
}

impl GistConditioning {
    /// Prefilled cache entries per block (0 for the recurrent kind).
    pub fn prefill_entries(&self) -> usize {
        match self {
            GistConditioning::KvPrefill { .. } => 1,
            GistConditioning::HiddenRow(_) => 0,
        }
    }
}

/// Build the decoder conditioning for one gist of a compressed segment.
///
/// KV kinds prefill the decoder cache with the gist's cached (k, v) — block
/// `j` of a depth-`D` decoder receives main layer `L - D + j`, so a one-block
/// decoder sees exactly the final layer. The recurrent kind passes the gist
/// hidden vector as the first input embedding instead.
pub fn gist_ae_input(
    graph: &mut Graph,
    trace: &SegmentTrace,
    gist_idx: usize,
    kind: MemoryKind,
    decoder_depth: usize,
) -> Result<GistConditioning> {
    let row = *trace
        .gist_rows
        .get(gist_idx)
        .ok_or_else(|| invalid("gist index out of range"))? as u32;
    match kind {
        MemoryKind::Kv => {
            let main_layers = trace.seg_kv.len();
            if decoder_depth > main_layers {
                return Err(invalid(alloc::format!(
                    "decoder depth {decoder_depth} exceeds model depth {main_layers}"
                )));
            }
            let mut k = Vec::with_capacity(decoder_depth);
            let mut v = Vec::with_capacity(decoder_depth);
            for j in 0..decoder_depth {
                let layer = &trace.seg_kv[main_layers - decoder_depth + j];
                k.push(graph.gather_rows(layer.k, &[row])?);
                v.push(graph.gather_rows(layer.v, &[row])?);
            }
            Ok(GistConditioning::KvPrefill { k, v })
        }
        MemoryKind::Recurrent => {
            Ok(GistConditioning::HiddenRow(
                graph.gather_rows(trace.last_hidden, &[row])?,
            ))
        }
        MemoryKind::None => Err(invalid("full attention produces no gists")),
    }
}

/// Forward the gist decoder over `[cond?, [ae]_r, tokens...]` and return the
/// logits of every input row (projected through the tied main embeddings).
pub fn decoder_logits(
    graph: &mut Graph,
    config: &ModelConfig,
    dec: &BoundDecoder,
    main_token_embed: TensorId,
    cond: &GistConditioning,
    ratio: usize,
    tokens: &[u32],
) -> Result<TensorId> {
    let row = dec
        .ratios
        .iter()
        .position(|&r| r == ratio)
        .ok_or_else(|| invalid(alloc::format!("no [ae] embedding for ratio {ratio}")))?;
    let ae_row = graph.gather_rows(dec.ae_embed, &[row as u32])?;
    let token_rows = if tokens.is_empty() {
        None
    } else {
        Some(graph.gather_rows(main_token_embed, tokens)?)
    };

    let (mut x, mem_entries, pos_base) = match cond {
        GistConditioning::KvPrefill { .. } => (ae_row, 1usize, 1u32),
        GistConditioning::HiddenRow(h) => (graph.concat_rows(*h, ae_row)?, 0usize, 0u32),
    };
    if let Some(tr) = token_rows {
        x = graph.concat_rows(x, tr)?;
    }
    let t = graph.rows(x);
    let positions: Vec<u32> = (0..t as u32).map(|i| pos_base + i).collect();
    let mask = alloc::sync::Arc::new(AttentionMask::causal_with_memory(mem_entries, t));

    for (j, block) in dec.blocks.iter().enumerate() {
        let memory = match cond {
            GistConditioning::KvPrefill { k, v } => Some(LayerKv { k: k[j], v: v[j] }),
            GistConditioning::HiddenRow(_) => None,
        };
        let (next, _) = block_forward(
            graph,
            block,
            x,
            &positions,
            memory,
            &mask,
            config.heads,
            config.rope_base,
        )?;
        x = next;
    }
    let hidden = graph.rms_norm(x, dec.final_gain)?;
    graph.matmul_nt(hidden, main_token_embed)
}

/// Mean of per-gist scalars: `(1/N) * sum_i loss_i`.
pub fn ae_aggregate(graph: &mut Graph, per_gist: &[TensorId]) -> Result<TensorId> {
    let total = graph.sum_n(per_gist)?;
    Ok(graph.scale(total, 1.0 / per_gist.len() as f32))
}

/// Fine-grained autoencoding loss over every gist of a compressed document:
/// `(1/N)(1/r) sum_i sum_j NLL(x_j | g_i, [ae]_r, x_{<j})`.
pub fn ae_loss(
    graph: &mut Graph,
    config: &ModelConfig,
    dec: &BoundDecoder,
    main_token_embed: TensorId,
    trace: &GistTrace,
    tokens: &[u32],
    kind: MemoryKind,
    ratio: usize,
) -> Result<Option<TensorId>> {
    let depth = dec.blocks.len();
    let mut per_gist = Vec::new();
    for seg in &trace.segments {
        for gist_idx in 0..seg.gist_rows.len() {
            let span = seg.coverage[gist_idx].clone();
            let snippet = &tokens[span];
            debug_assert_eq!(snippet.len(), ratio);
            let cond = gist_ae_input(graph, seg, gist_idx, kind, depth)?;
            let logits = decoder_logits(graph, config, dec, main_token_embed, &cond, ratio, snippet)?;
            // Rows [ae]..[ae]+r-1 predict the r snippet tokens.
            let ae_idx = match cond {
                GistConditioning::KvPrefill { .. } => 0u32,
                GistConditioning::HiddenRow(_) => 1u32,
            };
            let rows: Vec<u32> = (0..snippet.len() as u32).map(|j| ae_idx + j).collect();
            let pred = graph.gather_rows(logits, &rows)?;
            let weights = vec![1.0 / snippet.len() as f32; snippet.len()];
            per_gist.push(graph.cross_entropy(pred, snippet, &weights)?);
        }
    }
    if per_gist.is_empty() {
        return Ok(None);
    }
    Ok(Some(ae_aggregate(graph, &per_gist)?))
}

// ---------------------------------------------------------------------------
// Segment-wise token importance estimation
// ---------------------------------------------------------------------------

/// Which way the probability gap enters the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieOrientation {
    /// `Diff = min(log P(x|full) - log P(x|seg), gamma)`: tokens that rely on
    /// cross-segment context get the largest weights.
    MotivationConsistent,
    /// The fraction as printed: `Diff = min(log P(x|seg) - log P(x|full), gamma)`.
    PaperPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieConfig {
    pub gamma: f32,
    pub orientation: TieOrientation,
}

impl Default for TieConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            orientation: TieOrientation::MotivationConsistent,
        }
    }
}

impl TieConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(invalid("tie gamma must be positive"));
        }
        Ok(())
    }
}

/// Per-token loss weights, summing to 1 over their normalization scope.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    /// Absolute token indices the weights cover.
    pub scope: Vec<usize>,
    pub weights: Vec<f32>,
    /// Capped Diff values, aligned with `scope`.
    pub diffs: Vec<f32>,
}

/// Estimate each token's reliance on cross-segment context under a frozen
/// full-attention reference model.
///
/// Two no-grad reference forwards per sequence: one over the full context,
/// one per segment in isolation. The capped log-probability gap is
/// softmax-normalized over tokens in segments >= 2; a single-segment sequence
/// degenerates to uniform weights over all tokens.
pub fn tie_weights(
    ref_config: &ModelConfig,
    ref_params: &ModelParams,
    tokens: &[u32],
    segment_len: usize,
    tie: &TieConfig,
) -> Result<TokenWeights> {
    tie.validate()?;
    let sinks = ref_config.sink_count;
    let full_spec = CompressionSpec::full_attention(segment_len, sinks);

    let lp_full = reference_logprobs(ref_config, ref_params, &full_spec, tokens)?;
    let plan = segment_input(tokens.len(), segment_len)?;
    let mut lp_seg: Vec<f64> = vec![0.0; tokens.len()];
    for range in plan.iter() {
        let seg_tokens = &tokens[range.clone()];
        let lp = reference_logprobs(ref_config, ref_params, &full_spec, seg_tokens)?;
        lp_seg[range.clone()].copy_from_slice(&lp);
    }

    let scope: Vec<usize> = if plan.len() >= 2 {
        (segment_len..tokens.len()).collect()
    } else {
        (0..tokens.len()).collect()
    };
    let raw_diffs: Vec<f64> = scope
        .iter()
        .map(|&i| match tie.orientation {
            TieOrientation::MotivationConsistent => lp_full[i] - lp_seg[i],
            TieOrientation::PaperPrinted => lp_seg[i] - lp_full[i],
        })
        .collect();
    let (diffs, weights) = importance_weights(&raw_diffs, tie.gamma);
    Ok(TokenWeights {
        scope,
        weights,
        diffs,
    })
}

/// Cap raw log-probability gaps at `gamma` and softmax-normalize:
/// `w_i = exp(min(diff_i, gamma)) / sum_j exp(min(diff_j, gamma))`.
pub fn importance_weights(raw_diffs: &[f64], gamma: f32) -> (Vec<f32>, Vec<f32>) {
    let capped: Vec<f32> = raw_diffs
        .iter()
        .map(|&d| d.min(gamma as f64) as f32)
        .collect();
    let weights = softmax_f64(&capped);
    (capped, weights)
}

/// Log-probability of each token under the reference model (f64).
/// Tokens without a scoring row (no sinks) get log-prob 0 (Diff 0).
fn reference_logprobs(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let bound = BoundModel::bind(&mut graph, params, false);
    let doc = compress_document(&mut graph, config, &bound, spec, tokens)?;
    let logits = graph.to_tensor(doc.score_logits);
    let targets = doc.targets(tokens);
    let nll = crate::probe::nll_rows(&logits, targets);
    let mut out = vec![0.0f64; tokens.len()];
    for (row, &n) in nll.iter().enumerate() {
        out[doc.scored_from + row] = -n;
    }
    Ok(out)
}

fn softmax_f64(xs: &[f32]) -> Vec<f32> {
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let exps: Vec<f64> = xs.iter().map(|&x| libm::exp(x as f64 - max)).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / denom) as f32).collect()
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. State tensors are indexed in the same
/// order as the parameter visitation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update over tensors visited in state order. `visit` must yield
    /// exactly as many tensors as there are gradient buffers.
    pub fn step(
        &mut self,
        lr: f32,
        grads: &[Vec<f32>],
        mut visit: impl FnMut(&mut dyn FnMut(&mut [f32])),
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(invalid(alloc::format!(
                "adam: {} gradient buffers for {} state slots",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1 as f64, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2 as f64, self.t as f64);
        let mut idx = 0usize;
        let mut apply = |data: &mut [f32]| {
            let g = &grads[idx];
            debug_assert_eq!(g.len(), data.len());
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                let update = mhat / (libm::sqrt(vhat) + self.eps as f64);
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= (lr as f64 * update) as f32;
            }
            idx += 1;
        };
        visit(&mut apply);
        if idx != grads.len() {
            return Err(invalid("adam: visitation count mismatch"));
        }
        Ok(())
    }

    pub fn state(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: usize, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(invalid("adam restore: slot count mismatch"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f32,
    /// Final learning rate as a fraction of the peak (cosine decay target).
    pub final_lr_frac: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Compression ratios sampled per training instance.
    pub ratios: Vec<usize>,
    /// Autoencoding loss coefficient; 0 disables the AE term.
    pub lambda_ae: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f32,
    /// Token importance estimation; requires a frozen reference model.
    pub tie: Option<TieConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 3e-4,
            warmup_frac: 0.01,
            final_lr_frac: 0.5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ratios: vec![4, 8, 16, 32],
            lambda_ae: 1.0,
            max_grad_norm: 1.0,
            tie: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("steps and batch_size must be positive"));
        }
        if warmup_steps(self) >= self.steps {
            return Err(invalid("warmup must be shorter than the run"));
        }
        if self.lambda_ae < 0.0 {
            return Err(invalid("lambda_ae must be non-negative"));
        }
        if self.ratios.is_empty() {
            return Err(invalid("ratio set must be nonempty"));
        }
        if let Some(tie) = &self.tie {
            tie.validate()?;
        }
        Ok(())
    }
}

fn warmup_steps(cfg: &TrainConfig) -> usize {
    (libm::round(cfg.steps as f64 * cfg.warmup_frac as f64) as usize).max(1)
}

/// Learning rate at a step: linear warmup, then cosine decay to
/// `final_lr_frac * peak` exactly at the last step.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f32 {
    let peak = cfg.learning_rate as f64;
    let warmup = warmup_steps(cfg);
    if step < warmup {
        return (peak * (step + 1) as f64 / warmup as f64) as f32;
    }
    let last = (cfg.steps - 1).max(warmup);
    let denom = (last - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / denom).min(1.0);
    let floor = peak * cfg.final_lr_frac as f64;
    (floor + (peak - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))) as f32
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Per-step metrics for the JSONL stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lm_loss: f64,
    pub ae_loss: f64,
    pub total: f64,
    pub lr: f32,
    /// Compression ratio sampled for each batch instance (empty when the
    /// architecture is full attention).
    pub ratios: Vec<usize>,
}

/// Owns the trainable state of one experiment.
pub struct Trainer {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub decoder: GistDecoder,
    /// Architecture under training; its ratio field is resampled per instance.
    pub arch: CompressionSpec,
    pub train: TrainConfig,
    /// Frozen full-attention reference for TIE.
    pub reference: Option<(ModelConfig, ModelParams)>,
    pub opt: Adam,
    pub step: usize,
    pub rng: Rng,
}

impl Trainer {
    pub fn new(
        config: ModelConfig,
        arch: CompressionSpec,
        train: TrainConfig,
        reference: Option<(ModelConfig, ModelParams)>,
    ) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        train.validate()?;
        if arch.memory != MemoryKind::None {
            for &r in &train.ratios {
                arch.with_ratio(r).validate()?;
            }
        }
        if train.tie.is_some() && reference.is_none() {
            return Err(invalid("TIE requires a frozen reference model"));
        }
        if let Some((ref_cfg, _)) = &reference {
            if ref_cfg.vocab_size != config.vocab_size {
                return Err(invalid(alloc::format!(
                    "reference vocabulary {} != model vocabulary {}",
                    ref_cfg.vocab_size,
                    config.vocab_size
                )));
            }
        }
        let params = ModelParams::init(&config, train.seed);
        let decoder = GistDecoder::ae(&config, &train.ratios, train.seed);
        let mut sizes = Vec::new();
        params.visit(&mut |_, t| sizes.push(t.numel()));
        decoder.visit(&mut |_, t| sizes.push(t.numel()));
        let opt = Adam::new(
            &sizes,
            train.beta1,
            train.beta2,
            train.adam_eps,
            train.weight_decay,
        );
        let rng = Rng::derive(train.seed, 0x7472_6169); // "trai"
        Ok(Self {
            config,
            params,
            decoder,
            arch,
            train,
            reference,
            opt,
            step: 0,
            rng,
        })
    }

    fn grad_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.params.visit(&mut |_, t| sizes.push(t.numel()));
        self.decoder.visit(&mut |_, t| sizes.push(t.numel()));
        sizes
    }

    /// One optimizer step over a batch of token sequences.
    pub fn train_step(&mut self, batch: &[&[u32]]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let lr = lr_at(&self.train, self.step);
        let mut grads: Vec<Vec<f32>> = self.grad_sizes().iter().map(|&s| vec![0.0; s]).collect();
        let mut lm_sum = 0.0f64;
        let mut ae_sum = 0.0f64;
        let mut total_sum = 0.0f64;
        let mut sampled = Vec::new();

        for (bi, &tokens) in batch.iter().enumerate() {
            let spec = if self.arch.memory == MemoryKind::None {
                self.arch
            } else {
                let r = *self.rng.choose(&self.train.ratios);
                sampled.push(r);
                self.arch.with_ratio(r)
            };
            let mut graph = Graph::new();
            let bound = BoundModel::bind(&mut graph, &self.params, true);
            let bound_dec = BoundDecoder::bind(&mut graph, &self.decoder, true);
            let doc = compress_document(&mut graph, &self.config, &bound, &spec, tokens)?;
            let targets = doc.targets(tokens);

            let weights = self.lm_weights(tokens, doc.scored_from)?;
            let lm = graph.cross_entropy(doc.score_logits, targets, &weights)?;

            let ae = if self.train.lambda_ae > 0.0 && spec.memory != MemoryKind::None {
                ae_loss(
                    &mut graph,
                    &self.config,
                    &bound_dec,
                    bound.token_embed,
                    &doc.trace,
                    tokens,
                    spec.memory,
                    spec.ratio.expect("compressed spec"),
                )?
            } else {
                None
            };

            let total = match ae {
                Some(ae_id) => {
                    let scaled = graph.scale(ae_id, self.train.lambda_ae);
                    graph.add(lm, scaled)?
                }
                None => lm,
            };

            let total_val = graph.scalar_value(total) as f64;
            if !total_val.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "loss at step {} instance {bi}",
                    self.step
                )));
            }
            lm_sum += graph.scalar_value(lm) as f64;
            ae_sum += ae.map_or(0.0, |id| graph.scalar_value(id) as f64);
            total_sum += total_val;

            graph.backward(total)?;
            let mut ids = bound.ids();
            ids.extend(bound_dec.ids());
            for (slot, id) in grads.iter_mut().zip(ids) {
                if let Some(g) = graph.grad(id) {
                    for (acc, &x) in slot.iter_mut().zip(g) {
                        *acc += x;
                    }
                }
            }
        }

        let mut inv = 1.0 / batch.len() as f32;
        if self.train.max_grad_norm > 0.0 {
            let mut sq = 0.0f64;
            for g in &grads {
                for &x in g {
                    let x = x as f64 * inv as f64;
                    sq += x * x;
                }
            }
            let norm = libm::sqrt(sq) as f32;
            if norm > self.train.max_grad_norm {
                inv *= self.train.max_grad_norm / norm;
            }
        }
        for g in &mut grads {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        let params = &mut self.params;
        let decoder = &mut self.decoder;
        self.opt.step(lr, &grads, |apply| {
            params.visit_mut(&mut |_, t| apply(t.data_mut()));
            decoder.visit_mut(&mut |_, t| apply(t.data_mut()));
        })?;
        self.step += 1;

        let n = batch.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            lm_loss: lm_sum / n,
            ae_loss: ae_sum / n,
            total: total_sum / n,
            lr,
            ratios: sampled,
        })
    }

    /// Cross-entropy weights over scored rows: uniform without TIE; with TIE,
    /// first-segment tokens share a uniform mean and later tokens carry the
    /// softmax importance weights.
    fn lm_weights(&self, tokens: &[u32], scored_from: usize) -> Result<Vec<f32>> {
        let rows = tokens.len() - scored_from;
        let Some(tie) = &self.train.tie else {
            return Ok(vec![1.0 / rows as f32; rows]);
        };
        let (ref_cfg, ref_params) = self
            .reference
            .as_ref()
            .ok_or_else(|| invalid("TIE requires a reference model"))?;
        let tw = tie_weights(ref_cfg, ref_params, tokens, self.arch.segment_len, tie)?;
        let mut weights = vec![0.0f32; rows];
        let seg1_end = self.arch.segment_len.min(tokens.len());
        let seg1_scored = seg1_end.saturating_sub(scored_from);
        if tokens.len() <= self.arch.segment_len {
            // Single segment: TIE degenerates to uniform over all tokens.
            for (i, &w) in tw.scope.iter().zip(&tw.weights) {
                if *i >= scored_from {
                    weights[i - scored_from] = w;
                }
            }
            return Ok(weights);
        }
        for w in weights.iter_mut().take(seg1_scored) {
            *w = 1.0 / seg1_scored as f32;
        }
        for (&i, &w) in tw.scope.iter().zip(&tw.weights) {
            weights[i - scored_from] = w;
        }
        Ok(weights)
    }
}
