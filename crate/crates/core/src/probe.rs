//! Diagnostic harness: what does the compression actually keep?
//!
//! Sliding-window perplexity, within-segment loss profiles (the boundary
//! effect), truncated-context and needle-recall tasks, and reconstruction
//! probing of gist representations with weak and strong decoders. Every
//! evaluation here is side-effect-free on model parameters, and greedy
//! decoding is deterministic.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::decode::{argmax, Generator};
use crate::error::{invalid, Result};
use crate::gist::{compress_document, segment_input, CompressionSpec};
use crate::graph::Graph;
use crate::model::{BoundModel, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::TensorData;
use crate::train::{
    ae_loss, decoder_logits, gist_ae_input, Adam, BoundDecoder, GistConditioning, GistDecoder,
};

/// Per-row negative log-likelihood of `targets` under `logits` (f64).
pub fn nll_rows(logits: &TensorData, targets: &[u32]) -> Vec<f64> {
    let v = logits.cols();
    let mut out = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0f64;
        for &z in row {
            denom += libm::exp((z - max) as f64);
        }
        let lse = max as f64 + libm::log(denom);
        debug_assert!((t as usize) < v);
        out.push(lse - row[t as usize] as f64);
    }
    out
}

/// Compress one document (no gradients) and return each token's NLL together
/// with the index of the first scored token.
pub fn document_nlls(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    tokens: &[u32],
) -> Result<(Vec<f64>, usize)> {
    let mut graph = Graph::new();
    let bound = BoundModel::bind(&mut graph, params, false);
    let doc = compress_document(&mut graph, config, &bound, spec, tokens)?;
    let logits = graph.to_tensor(doc.score_logits);
    Ok((nll_rows(&logits, doc.targets(tokens)), doc.scored_from))
}

/// Mean NLL of each non-overlapping window (stride = window length).
pub fn window_mean_nlls(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    corpus: &[u32],
    window: usize,
) -> Result<Vec<f64>> {
    if window == 0 || corpus.len() < window {
        return Err(invalid(alloc::format!(
            "corpus of {} tokens is shorter than one {window}-token window",
            corpus.len()
        )));
    }
    let count = corpus.len() / window;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let (nlls, _) = document_nlls(config, params, spec, &corpus[w * window..(w + 1) * window])?;
        out.push(crate::stats::mean(&nlls));
    }
    Ok(out)
}

/// Sliding-window perplexity: `exp(mean NLL over all scored tokens)` with
/// non-overlapping windows.
pub fn perplexity(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    corpus: &[u32],
    window: usize,
) -> Result<f64> {
    if window == 0 || corpus.len() < window {
        return Err(invalid("corpus shorter than one window"));
    }
    let count = corpus.len() / window;
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for w in 0..count {
        let (nlls, _) = document_nlls(config, params, spec, &corpus[w * window..(w + 1) * window])?;
        total += nlls.iter().sum::<f64>();
        tokens += nlls.len();
    }
    Ok(libm::exp(total / tokens as f64))
}

/// Mean NLL per within-segment offset, over segments >= 2 only (the first
/// segment has no gist context and is excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProfile {
    pub mean_nll: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn boundary_profile(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    docs: &[Vec<u32>],
) -> Result<BoundaryProfile> {
    let len = spec.segment_len;
    let mut sums = vec![0.0f64; len];
    let mut counts = vec![0usize; len];
    let mut saw_multi_segment = false;
    for tokens in docs {
        let plan = segment_input(tokens.len(), len)?;
        if plan.len() < 2 {
            continue;
        }
        saw_multi_segment = true;
        let (nlls, scored_from) = document_nlls(config, params, spec, tokens)?;
        for (row, &nll) in nlls.iter().enumerate() {
            let abs = scored_from + row;
            if abs >= len {
                sums[abs % len] += nll;
                counts[abs % len] += 1;
            }
        }
    }
    if !saw_multi_segment {
        return Err(invalid(
            "boundary profile needs at least one document with >= 2 segments",
        ));
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(alloc::format!(
            "no tokens observed at within-segment offset {j}"
        )));
    }
    let mean_nll = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c as f64)
        .collect();
    Ok(BoundaryProfile { mean_nll, counts })
}

/// Per-segment (first-decile mean NLL, last-decile mean NLL) pairs across
/// full segments >= 2; the paired samples behind the boundary-effect test.
pub fn boundary_decile_pairs(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    docs: &[Vec<u32>],
) -> Result<Vec<(f64, f64)>> {
    let len = spec.segment_len;
    let decile = (len / 10).max(1);
    let mut pairs = Vec::new();
    for tokens in docs {
        let plan = segment_input(tokens.len(), len)?;
        if plan.len() < 2 {
            continue;
        }
        let (nlls, scored_from) = document_nlls(config, params, spec, tokens)?;
        let nll_at = |abs: usize| nlls[abs - scored_from];
        for si in 1..plan.len() {
            let seg = plan.segment(si);
            if seg.end - seg.start < len {
                continue; // partial tail segment
            }
            let first: f64 = (0..decile).map(|j| nll_at(seg.start + j)).sum::<f64>() / decile as f64;
            let last: f64 =
                (0..decile).map(|j| nll_at(seg.end - decile + j)).sum::<f64>() / decile as f64;
            pairs.push((first, last));
        }
    }
    if pairs.is_empty() {
        return Err(invalid("no full segments >= 2 found"));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Generation tasks
// ---------------------------------------------------------------------------

/// One needle-recall case: a context containing the needle span, a query
/// suffix, and the expected answer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallCase {
    pub context: Vec<u32>,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
    /// Needle span within `context`.
    pub needle: Range<usize>,
}

/// Substring exact match over token slices. With the character-level
/// vocabulary this is exactly a string `contains`.
pub fn sub_em(generated: &[u32], answer: &[u32]) -> bool {
    if answer.is_empty() {
        return true;
    }
    if generated.len() < answer.len() {
        return false;
    }
    generated
        .windows(answer.len())
        .any(|w| w == answer)
}

/// Greedy-decode a case's answer; `max_tokens` caps generation length.
pub fn run_case(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    context: &[u32],
    query: &[u32],
    max_tokens: usize,
) -> Result<Vec<u32>> {
    let mut generator = Generator::new(config, params, *spec)?;
    generator.push_tokens(context)?;
    generator.push_tokens(query)?;
    generator.generate_greedy(max_tokens, None)
}

/// SubEM accuracy over recall cases, generating `answer.len() + margin`
/// tokens per case.
pub fn sub_em_accuracy(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    cases: &[RecallCase],
    margin: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for case in cases {
        let generated = run_case(
            config,
            params,
            spec,
            &case.context,
            &case.query,
            case.answer.len() + margin,
        )?;
        if sub_em(&generated, &case.answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len().max(1) as f64)
}

/// Per-case hit vector (1.0 / 0.0), for paired significance tests.
pub fn sub_em_hits(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    cases: &[RecallCase],
    margin: usize,
) -> Result<Vec<f64>> {
    let mut hits = Vec::with_capacity(cases.len());
    for case in cases {
        let generated = run_case(
            config,
            params,
            spec,
            &case.context,
            &case.query,
            case.answer.len() + margin,
        )?;
        hits.push(if sub_em(&generated, &case.answer) { 1.0 } else { 0.0 });
    }
    Ok(hits)
}

/// Context truncated to its last `k` tokens, then scored by SubEM. When `k`
/// is a multiple of the segment length the query lands at a segment start.
pub fn truncated_context_eval(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    cases: &[RecallCase],
    k: usize,
    margin: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for case in cases {
        let start = case.context.len().saturating_sub(k);
        let generated = run_case(
            config,
            params,
            spec,
            &case.context[start..],
            &case.query,
            case.answer.len() + margin,
        )?;
        if sub_em(&generated, &case.answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len().max(1) as f64)
}

/// First-k prefix accuracies for long-needle recall (greedy decoding).
///
/// Returns `(k, accuracy)` per requested prefix length; a generation counts
/// for `k` iff its first `k` tokens match the answer exactly, so the
/// accuracies are nested by construction.
pub fn prefix_recall(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    cases: &[RecallCase],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let per_case = prefix_recall_hits(config, params, spec, cases, ks)?;
    Ok(ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let acc = per_case.iter().map(|hits| hits[ki]).sum::<f64>() / cases.len().max(1) as f64;
            (k, acc)
        })
        .collect())
}

/// First-k exact-prefix hits for one generation: entry `i` is 1.0 iff the
/// first `ks[i]` generated tokens equal the answer's first `ks[i]` tokens.
/// Nesting holds by construction: a hit at `k` implies hits at all `k' <= k`.
pub fn prefix_match_hits(generated: &[u32], answer: &[u32], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            let ok = generated.len() >= k && answer.len() >= k && generated[..k] == answer[..k];
            if ok {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-case prefix hits aligned with `ks`, for paired tests.
pub fn prefix_recall_hits(
    config: &ModelConfig,
    params: &ModelParams,
    spec: &CompressionSpec,
    cases: &[RecallCase],
    ks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        if case.answer.len() < max_k {
            return Err(invalid(alloc::format!(
                "answer of {} tokens cannot score prefix {max_k}",
                case.answer.len()
            )));
        }
        let generated = run_case(config, params, spec, &case.context, &case.query, max_k)?;
        out.push(prefix_match_hits(&generated, &case.answer, ks));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reconstruction probing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderStrength {
    /// Single transformer block.
    Weak,
    /// Randomly initialized full-depth copy of the main architecture.
    Strong,
}

impl DecoderStrength {
    pub fn depth(self, config: &ModelConfig) -> usize {
        match self {
            DecoderStrength::Weak => 1,
            DecoderStrength::Strong => config.layers,
        }
    }
}

/// Token-level reconstruction accuracy per compression ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub strength: DecoderStrength,
    pub per_ratio: Vec<(usize, f64)>,
}

/// Train a probe decoder to reconstruct snippets from a frozen model's gists.
/// Returns the loss trace.
#[allow(clippy::too_many_arguments)]
pub fn train_probe_decoder(
    config: &ModelConfig,
    params: &ModelParams,
    arch: CompressionSpec,
    decoder: &mut GistDecoder,
    corpus: &[Vec<u32>],
    steps: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(invalid("probe training needs a corpus"));
    }
    let mut sizes = Vec::new();
    decoder.visit(&mut |_, t| sizes.push(t.numel()));
    let mut opt = Adam::new(&sizes, 0.9, 0.999, 1e-8, 0.0);
    let mut rng = Rng::derive(seed, 0x7072_6f62); // "prob"
    let mut trace = Vec::with_capacity(steps);

    for _ in 0..steps {
        let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut loss_sum = 0.0f64;
        let mut counted = 0usize;
        for _ in 0..batch_size {
            let tokens = rng.choose(corpus).as_slice();
            let ratio = *rng.choose(&decoder.ratios);
            let spec = arch.with_ratio(ratio);
            let mut graph = Graph::new();
            let bound = BoundModel::bind(&mut graph, params, false);
            let bound_dec = BoundDecoder::bind(&mut graph, decoder, true);
            let doc = compress_document(&mut graph, config, &bound, &spec, tokens)?;
            let Some(loss) = ae_loss(
                &mut graph,
                config,
                &bound_dec,
                bound.token_embed,
                &doc.trace,
                tokens,
                spec.memory,
                ratio,
            )?
            else {
                continue;
            };
            loss_sum += graph.scalar_value(loss) as f64;
            counted += 1;
            graph.backward(loss)?;
            for (slot, id) in grads.iter_mut().zip(bound_dec.ids()) {
                if let Some(g) = graph.grad(id) {
                    for (acc, &x) in slot.iter_mut().zip(g) {
                        *acc += x;
                    }
                }
            }
        }
        if counted == 0 {
            return Err(invalid("probe batch produced no gists"));
        }
        let inv = 1.0 / counted as f32;
        for g in &mut grads {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        opt.step(lr, &grads, |apply| {
            decoder.visit_mut(&mut |_, t| apply(t.data_mut()));
        })?;
        trace.push(loss_sum / counted as f64);
    }
    Ok(trace)
}

/// Greedily reconstruct one gist's snippet with the probe decoder,
/// re-feeding its own predictions.
fn reconstruct_gist(
    graph: &mut Graph,
    config: &ModelConfig,
    dec: &BoundDecoder,
    main_token_embed: crate::graph::TensorId,
    cond: &GistConditioning,
    ratio: usize,
) -> Result<Vec<u32>> {
    let mut predicted: Vec<u32> = Vec::with_capacity(ratio);
    for _ in 0..ratio {
        let logits = decoder_logits(graph, config, dec, main_token_embed, cond, ratio, &predicted)?;
        let rows = graph.rows(logits);
        let data = graph.data(logits);
        let v = graph.cols(logits);
        let last = &data[(rows - 1) * v..rows * v];
        predicted.push(argmax(last));
    }
    Ok(predicted)
}

/// Token-level reconstruction accuracy of a trained probe decoder at each
/// ratio: the fraction of snippet tokens greedily reconstructed in place.
pub fn reconstruct_probe(
    config: &ModelConfig,
    params: &ModelParams,
    arch: CompressionSpec,
    decoder: &GistDecoder,
    strength: DecoderStrength,
    corpus: &[Vec<u32>],
    ratios: &[usize],
) -> Result<ProbeReport> {
    let mut per_ratio = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let spec = arch.with_ratio(ratio);
        spec.validate()?;
        let mut correct = 0usize;
        let mut total = 0usize;
        for tokens in corpus {
            let mut graph = Graph::new();
            let bound = BoundModel::bind(&mut graph, params, false);
            let bound_dec = BoundDecoder::bind(&mut graph, decoder, false);
            let doc = compress_document(&mut graph, config, &bound, &spec, tokens)?;
            for seg in &doc.trace.segments {
                for gist_idx in 0..seg.gist_rows.len() {
                    let span = seg.coverage[gist_idx].clone();
                    let snippet = &tokens[span];
                    let cond = gist_ae_input(
                        &mut graph,
                        seg,
                        gist_idx,
                        spec.memory,
                        decoder.block_count(),
                    )?;
                    let predicted = reconstruct_gist(
                        &mut graph,
                        config,
                        &bound_dec,
                        bound.token_embed,
                        &cond,
                        ratio,
                    )?;
                    correct += predicted
                        .iter()
                        .zip(snippet)
                        .filter(|(p, s)| p == s)
                        .count();
                    total += snippet.len();
                }
            }
        }
        if total == 0 {
            return Err(invalid("no gists to reconstruct"));
        }
        per_ratio.push((ratio, correct as f64 / total as f64));
    }
    Ok(ProbeReport {
        strength,
        per_ratio,
    })
}
