//! Segment-wise gist compression: layout planning, mask construction, memory
//! accumulation, and the per-document compression loop.
//!
//! Processing one document walks its segments in order. Each segment is
//! embedded as an interleaved stream of raw tokens and gist tokens, forwarded
//! against the accumulated memory, and the gist entries of the segment are
//! appended to that memory. Later segments see earlier raw tokens only
//! through the gists. Position ids are monotone stream indices over sinks,
//! raw tokens, and gists; cached gist KV keep the positions they were
//! computed at.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{AttentionMask, Graph, TensorId};
use crate::model::{forward, BoundModel, ForwardRequest, LayerKv, LayerKvData, ModelConfig};
use crate::tensor::TensorData;

/// Where accumulated compressed context lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryKind {
    /// No compression: memory accumulates every raw token's KV (full attention).
    None,
    /// Gist last-hidden vectors, re-fed as input embeddings each segment.
    Recurrent,
    /// Gist per-layer KV entries, reused directly.
    Kv,
}

/// How gist tokens are placed within a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// All gists trail the segment's raw tokens.
    Coarse,
    /// One gist after every `ratio` raw tokens.
    Fine,
}

/// Architecture selector for one compression run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    pub memory: MemoryKind,
    pub granularity: Granularity,
    /// Raw tokens per gist; `None` only for the full-attention baseline.
    pub ratio: Option<usize>,
    pub segment_len: usize,
    pub sink_count: usize,
}

impl CompressionSpec {
    pub fn full_attention(segment_len: usize, sink_count: usize) -> Self {
        Self {
            memory: MemoryKind::None,
            granularity: Granularity::Coarse,
            ratio: None,
            segment_len,
            sink_count,
        }
    }

    pub fn coarse_recurrent(segment_len: usize, ratio: usize, sink_count: usize) -> Self {
        Self {
            memory: MemoryKind::Recurrent,
            granularity: Granularity::Coarse,
            ratio: Some(ratio),
            segment_len,
            sink_count,
        }
    }

    pub fn coarse_kv(segment_len: usize, ratio: usize, sink_count: usize) -> Self {
        Self {
            memory: MemoryKind::Kv,
            granularity: Granularity::Coarse,
            ratio: Some(ratio),
            segment_len,
            sink_count,
        }
    }

    pub fn fine_kv(segment_len: usize, ratio: usize, sink_count: usize) -> Self {
        Self {
            memory: MemoryKind::Kv,
            granularity: Granularity::Fine,
            ratio: Some(ratio),
            segment_len,
            sink_count,
        }
    }

    pub fn with_ratio(mut self, ratio: usize) -> Self {
        if self.memory != MemoryKind::None {
            self.ratio = Some(ratio);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(invalid("segment_len must be positive"));
        }
        match self.memory {
            MemoryKind::None => {
                if self.ratio.is_some() {
                    return Err(invalid("full attention takes no compression ratio"));
                }
            }
            MemoryKind::Recurrent => {
                if self.granularity == Granularity::Fine {
                    return Err(invalid(
                        "recurrent memory with fine-grained gists is infeasible \
                         (one forward per gist group cannot be parallelized)",
                    ));
                }
                self.require_ratio()?;
            }
            MemoryKind::Kv => {
                self.require_ratio()?;
            }
        }
        Ok(())
    }

    fn require_ratio(&self) -> Result<usize> {
        let r = self
            .ratio
            .ok_or_else(|| invalid("compressed memory requires a ratio"))?;
        if r == 0 {
            return Err(invalid("ratio must be positive"));
        }
        if self.segment_len % r != 0 {
            return Err(invalid(alloc::format!(
                "segment_len {} not divisible by ratio {r}",
                self.segment_len
            )));
        }
        Ok(r)
    }

    /// Gists produced by a full segment.
    pub fn gists_per_segment(&self) -> usize {
        match self.ratio {
            Some(r) => self.segment_len / r,
            None => 0,
        }
    }
}

/// Lossless partition of a document into fixed-length segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    segments: Vec<Range<usize>>,
}

impl SegmentPlan {
    pub fn iter(&self) -> impl Iterator<Item = &Range<usize>> {
        self.segments.iter()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment(&self, i: usize) -> &Range<usize> {
        &self.segments[i]
    }
}

/// Split `n` tokens into `ceil(n / segment_len)` contiguous segments; all but
/// the last have exactly `segment_len` tokens.
pub fn segment_input(n: usize, segment_len: usize) -> Result<SegmentPlan> {
    if n == 0 {
        return Err(invalid("cannot segment an empty input"));
    }
    if segment_len == 0 {
        return Err(invalid("segment_len must be positive"));
    }
    let mut segments = Vec::with_capacity(n.div_ceil(segment_len));
    let mut start = 0;
    while start < n {
        let end = (start + segment_len).min(n);
        segments.push(start..end);
        start = end;
    }
    Ok(SegmentPlan { segments })
}

/// One stream entry of a segment layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutEntry {
    Raw { token: u32 },
    /// `slot` is the gist's within-segment index.
    Gist { slot: usize },
}

/// The interleaved raw/gist plan for one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GistLayout {
    pub entries: Vec<LayoutEntry>,
    /// Stream position per entry, consecutive from the memory frontier.
    pub positions: Vec<u32>,
    /// Absolute token span each gist summarizes.
    pub coverage: Vec<Range<usize>>,
    pub gist_count: usize,
}

impl GistLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn raw_count(&self) -> usize {
        self.entries.len() - self.gist_count
    }

    /// Row indices of raw entries, in stream order.
    pub fn raw_rows(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| matches!(e, LayoutEntry::Raw { .. }).then_some(i))
            .collect()
    }

    /// Row indices of gist entries, in stream order.
    pub fn gist_rows(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| matches!(e, LayoutEntry::Gist { .. }).then_some(i))
            .collect()
    }

    /// Raw-only layout used by the full-attention baseline.
    pub fn raw_only(segment: &[u32], start_position: u32) -> Self {
        GistLayout {
            entries: segment.iter().map(|&t| LayoutEntry::Raw { token: t }).collect(),
            positions: (0..segment.len() as u32).map(|i| start_position + i).collect(),
            coverage: Vec::new(),
            gist_count: 0,
        }
    }
}

/// Interleave gist tokens into one segment per the spec's granularity.
///
/// Fine: `(r raws, 1 gist)` repeated, trailing remainder raws carry no gist.
/// Coarse: all raws, then the segment's gists. A partial final group never
/// produces a gist. `seg_start` is the segment's absolute token offset.
///
/// Raw tokens always take consecutive positions from `start_position`, so a
/// raw token's position never depends on the compression spec. A fine gist
/// shares the position of the last raw token it covers (compressed memory
/// then keeps gaps of size `r` between gists); coarse gists take the slots
/// after the segment.
pub fn insert_gists(
    segment: &[u32],
    spec: &CompressionSpec,
    seg_start: usize,
    start_position: u32,
) -> Result<GistLayout> {
    let r = spec
        .ratio
        .ok_or_else(|| invalid("insert_gists requires a ratio"))?;
    let t = segment.len() / r;
    let mut entries = Vec::with_capacity(segment.len() + t);
    let mut positions = Vec::with_capacity(segment.len() + t);
    let mut coverage = Vec::with_capacity(t);
    match spec.granularity {
        Granularity::Fine => {
            for (i, &tok) in segment.iter().enumerate() {
                entries.push(LayoutEntry::Raw { token: tok });
                positions.push(start_position + i as u32);
                if (i + 1) % r == 0 {
                    let slot = (i + 1) / r - 1;
                    entries.push(LayoutEntry::Gist { slot });
                    positions.push(start_position + i as u32);
                    coverage.push(seg_start + slot * r..seg_start + (slot + 1) * r);
                }
            }
        }
        Granularity::Coarse => {
            for (i, &tok) in segment.iter().enumerate() {
                entries.push(LayoutEntry::Raw { token: tok });
                positions.push(start_position + i as u32);
            }
            for slot in 0..t {
                entries.push(LayoutEntry::Gist { slot });
                positions.push(start_position + (segment.len() + slot) as u32);
                coverage.push(seg_start + slot * r..seg_start + (slot + 1) * r);
            }
        }
    }
    Ok(GistLayout {
        entries,
        positions,
        coverage,
        gist_count: t,
    })
}

/// Attention mask over a layout with `memory_entries` always-visible prefix
/// keys.
///
/// Gist entries attend to all memory plus every earlier stream entry (causal
/// over the interleaved stream), which realizes both granularity semantics
/// given the layout order. Raw entries attend to memory and earlier raw
/// entries only: skipping same-segment gists keeps raw-token logits identical
/// to an uncompressed forward whenever no memory has been consumed.
pub fn build_mask(layout: &GistLayout, memory_entries: usize) -> Arc<AttentionMask> {
    Arc::new(layout_mask(layout, memory_entries, 0))
}

/// As [`build_mask`], with `prefix` plain-causal query rows ahead of the
/// layout (the recurrent kind re-feeds its memory as input rows).
fn layout_mask(layout: &GistLayout, memory_entries: usize, prefix: usize) -> AttentionMask {
    let queries = prefix + layout.len();
    let keys = memory_entries + queries;
    let mut allow = vec![false; queries * keys];
    for i in 0..queries {
        let row = &mut allow[i * keys..(i + 1) * keys];
        for slot in row.iter_mut().take(memory_entries) {
            *slot = true;
        }
        let i_is_gist = i >= prefix
            && matches!(layout.entries[i - prefix], LayoutEntry::Gist { .. });
        for j in 0..=i {
            let j_is_gist = j >= prefix
                && matches!(layout.entries[j - prefix], LayoutEntry::Gist { .. });
            row[memory_entries + j] = i == j || i_is_gist || !j_is_gist;
        }
    }
    AttentionMask::new(queries, keys, allow).expect("constructed causal mask")
}

/// Accumulated compressed context, resident in one graph.
#[derive(Debug, Clone)]
pub struct MemoryState {
    kind: MemoryKind,
    /// Per-layer KV entries (Kv and None kinds).
    kv: Vec<LayerKv>,
    /// Gist hidden vectors `[m x d]` (Recurrent kind).
    hidden: Option<TensorId>,
    /// Position of every memory entry, strictly increasing.
    positions: Vec<u32>,
    /// Compressed (gist) entries only; sinks and raw KV are excluded.
    gist_entries: usize,
    /// Next unused stream position.
    next_position: u32,
}

impl MemoryState {
    pub fn new(kind: MemoryKind) -> Self {
        Self {
            kind,
            kv: Vec::new(),
            hidden: None,
            positions: Vec::new(),
            gist_entries: 0,
            next_position: 0,
        }
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    /// Total memory entries visible to the next segment (includes sinks for
    /// KV kinds; excludes the re-fed prefix for the recurrent kind).
    pub fn entries(&self) -> usize {
        self.positions.len()
    }

    /// Compressed entry count `m`.
    pub fn gist_entries(&self) -> usize {
        self.gist_entries
    }

    /// Highest position id consumed so far, if any.
    pub fn frontier(&self) -> Option<u32> {
        self.next_position.checked_sub(1)
    }

    pub fn next_position(&self) -> u32 {
        self.next_position
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn kv(&self) -> &[LayerKv] {
        &self.kv
    }

    pub fn hidden(&self) -> Option<TensorId> {
        self.hidden
    }

    /// Copy values out of the graph, e.g. to carry memory across graphs
    /// during incremental decoding.
    pub fn detach(&self, graph: &Graph) -> DetachedMemory {
        DetachedMemory {
            kind: self.kind,
            kv: self
                .kv
                .iter()
                .map(|l| LayerKvData {
                    k: graph.to_tensor(l.k),
                    v: graph.to_tensor(l.v),
                })
                .collect(),
            hidden: self.hidden.map(|h| graph.to_tensor(h)),
            positions: self.positions.clone(),
            gist_entries: self.gist_entries,
            next_position: self.next_position,
        }
    }
}

/// Plain-data memory snapshot (no graph attached).
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedMemory {
    pub kind: MemoryKind,
    pub kv: Vec<LayerKvData>,
    pub hidden: Option<TensorData>,
    pub positions: Vec<u32>,
    pub gist_entries: usize,
    pub next_position: u32,
}

impl DetachedMemory {
    pub fn new(kind: MemoryKind) -> Self {
        Self {
            kind,
            kv: Vec::new(),
            hidden: None,
            positions: Vec::new(),
            gist_entries: 0,
            next_position: 0,
        }
    }

    pub fn entries(&self) -> usize {
        self.positions.len()
    }

    /// Re-import into a fresh graph as constant leaves.
    pub fn attach(&self, graph: &mut Graph) -> MemoryState {
        MemoryState {
            kind: self.kind,
            kv: self
                .kv
                .iter()
                .map(|l| LayerKv {
                    k: graph.leaf(l.k.clone()),
                    v: graph.leaf(l.v.clone()),
                })
                .collect(),
            hidden: self.hidden.as_ref().map(|h| graph.leaf(h.clone())),
            positions: self.positions.clone(),
            gist_entries: self.gist_entries,
            next_position: self.next_position,
        }
    }
}

/// Trace of one segment's gists, enough to condition decoders on them.
#[derive(Debug, Clone)]
pub struct SegmentTrace {
    /// This segment's per-layer KV tensors (all entries, raw and gist).
    pub seg_kv: Vec<LayerKv>,
    /// This segment's final hidden states (all entries).
    pub last_hidden: TensorId,
    /// Row indices of gist entries within the segment tensors.
    pub gist_rows: Vec<usize>,
    /// Absolute token span each gist summarizes.
    pub coverage: Vec<Range<usize>>,
    /// Baked stream position of each gist.
    pub gist_positions: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct GistTrace {
    pub segments: Vec<SegmentTrace>,
}

impl GistTrace {
    pub fn gist_count(&self) -> usize {
        self.segments.iter().map(|s| s.gist_rows.len()).sum()
    }
}

/// Output of processing one segment.
pub struct SegmentStep {
    /// `[raw_count x V]` logits for the segment's raw entries, stream order.
    pub raw_logits: TensorId,
    /// Last-sink logits when this segment carried the document's first
    /// re-fed prefix (recurrent kind only).
    pub prefix_boot: Option<TensorId>,
    pub trace: SegmentTrace,
    pub memory: MemoryState,
}

/// Result of compressing a whole document.
pub struct DocumentResult {
    /// `[rows x V]` where row `i` predicts token `scored_from + i`. When sinks
    /// exist, row 0 is the last sink's prediction of the first token and
    /// `scored_from == 0`; without sinks the first token is unscored.
    pub score_logits: TensorId,
    pub scored_from: usize,
    pub trace: GistTrace,
    pub memory: MemoryState,
}

impl DocumentResult {
    /// Targets aligned with `score_logits` rows.
    pub fn targets<'a>(&self, tokens: &'a [u32]) -> &'a [u32] {
        &tokens[self.scored_from..]
    }
}

/// Start a document: reserve sink positions and, for KV-cache kinds, run the
/// sinks through the model so their KV persists in memory. Returns the boot
/// logits row (last sink) when available.
pub fn begin_document(
    graph: &mut Graph,
    config: &ModelConfig,
    bound: &BoundModel,
    spec: &CompressionSpec,
) -> Result<(MemoryState, Option<TensorId>)> {
    spec.validate()?;
    if spec.sink_count != config.sink_count {
        return Err(invalid(alloc::format!(
            "spec sink_count {} != model sink_count {}",
            spec.sink_count,
            config.sink_count
        )));
    }
    let mut memory = MemoryState::new(spec.memory);
    let s = spec.sink_count;
    if s == 0 {
        return Ok((memory, None));
    }
    memory.next_position = s as u32;
    match spec.memory {
        MemoryKind::Recurrent => {
            // Sinks are re-fed as part of each segment's prefix; nothing to
            // run yet. Boot logits come from the first segment's prefix.
            Ok((memory, None))
        }
        MemoryKind::Kv | MemoryKind::None => {
            let positions: Vec<u32> = (0..s as u32).collect();
            let mask = Arc::new(AttentionMask::causal_with_memory(0, s));
            let out = forward(
                graph,
                config,
                bound,
                &ForwardRequest {
                    embeds: bound.sink_embed,
                    positions: &positions,
                    memory: None,
                    mask: &mask,
                },
            )?;
            memory.kv = out.new_kv;
            memory.positions = positions;
            let boot = graph.gather_rows(out.logits, &[s as u32 - 1])?;
            Ok((memory, Some(boot)))
        }
    }
}

/// Process one segment: forward its interleaved layout against memory and
/// fold the segment's compressed entries into the returned memory.
pub fn step_segment(
    graph: &mut Graph,
    config: &ModelConfig,
    bound: &BoundModel,
    spec: &CompressionSpec,
    memory: MemoryState,
    layout: &GistLayout,
) -> Result<SegmentStep> {
    if layout.is_empty() {
        return Err(invalid("step_segment: empty layout"));
    }
    if layout.positions[0] != memory.next_position {
        return Err(invalid(alloc::format!(
            "layout starts at position {} but memory frontier is {}",
            layout.positions[0],
            memory.next_position
        )));
    }
    if memory.kind != spec.memory {
        return Err(invalid("memory kind does not match spec"));
    }
    let max_pos = *layout.positions.last().expect("nonempty") as usize;
    if max_pos >= config.max_position {
        return Err(invalid(alloc::format!(
            "position {max_pos} exceeds max_position {}",
            config.max_position
        )));
    }

    let first_recurrent_prefix =
        spec.memory == MemoryKind::Recurrent && memory.hidden.is_none() && spec.sink_count > 0;

    // Embed the interleaved stream by gathering rows from the stacked
    // [token_embed; gist_embed] table.
    let combined = graph.concat_rows(bound.token_embed, bound.gist_embed)?;
    let vocab = config.vocab_size as u32;
    let stream_ids: Vec<u32> = layout
        .entries
        .iter()
        .map(|e| match e {
            LayoutEntry::Raw { token } => {
                debug_assert!(*token < vocab);
                *token
            }
            LayoutEntry::Gist { slot } => vocab + (*slot % config.gist_slots) as u32,
        })
        .collect();
    let entry_embeds = graph.gather_rows(combined, &stream_ids)?;

    let mut new_memory = memory;
    let (out, row_base) = match spec.memory {
        MemoryKind::Recurrent => {
            // Prefix: sinks plus all accumulated gist hiddens, re-fed as
            // input embeddings; their KV is recomputed fresh each segment.
            let prefix = match new_memory.hidden {
                Some(h) => graph.concat_rows(bound.sink_embed, h)?,
                None => bound.sink_embed,
            };
            let prefix_len = graph.rows(prefix);
            let embeds = graph.concat_rows(prefix, entry_embeds)?;
            let mut positions: Vec<u32> = (0..spec.sink_count as u32).collect();
            positions.extend_from_slice(&new_memory.positions);
            positions.extend_from_slice(&layout.positions);
            let mask = Arc::new(layout_mask(layout, 0, prefix_len));
            let out = forward(
                graph,
                config,
                bound,
                &ForwardRequest {
                    embeds,
                    positions: &positions,
                    memory: None,
                    mask: &mask,
                },
            )?;
            (out, prefix_len)
        }
        MemoryKind::Kv | MemoryKind::None => {
            let mask = build_mask(layout, new_memory.entries());
            let mem = (!new_memory.kv.is_empty()).then_some(new_memory.kv.as_slice());
            let out = forward(
                graph,
                config,
                bound,
                &ForwardRequest {
                    embeds: entry_embeds,
                    positions: &layout.positions,
                    memory: mem,
                    mask: &mask,
                },
            )?;
            (out, 0)
        }
    };

    let raw_rows: Vec<u32> = layout.raw_rows().iter().map(|&r| (row_base + r) as u32).collect();
    let gist_rows_abs: Vec<u32> = layout.gist_rows().iter().map(|&r| (row_base + r) as u32).collect();
    let raw_logits = graph.gather_rows(out.logits, &raw_rows)?;
    let prefix_boot = if first_recurrent_prefix {
        Some(graph.gather_rows(out.logits, &[spec.sink_count as u32 - 1])?)
    } else {
        None
    };
    let gist_positions: Vec<u32> = layout
        .gist_rows()
        .iter()
        .map(|&r| layout.positions[r])
        .collect();

    // Fold this segment's compressed entries into memory.
    match spec.memory {
        MemoryKind::Recurrent => {
            if !gist_rows_abs.is_empty() {
                let gist_hidden = graph.gather_rows(out.last_hidden, &gist_rows_abs)?;
                new_memory.hidden = Some(match new_memory.hidden {
                    Some(h) => graph.concat_rows(h, gist_hidden)?,
                    None => gist_hidden,
                });
                new_memory.positions.extend_from_slice(&gist_positions);
                new_memory.gist_entries += gist_rows_abs.len();
            }
        }
        MemoryKind::Kv => {
            if !gist_rows_abs.is_empty() {
                let mut merged = Vec::with_capacity(config.layers);
                for (li, kv) in out.new_kv.iter().enumerate() {
                    let gk = graph.gather_rows(kv.k, &gist_rows_abs)?;
                    let gv = graph.gather_rows(kv.v, &gist_rows_abs)?;
                    merged.push(match new_memory.kv.get(li) {
                        Some(m) => LayerKv {
                            k: graph.concat_rows(m.k, gk)?,
                            v: graph.concat_rows(m.v, gv)?,
                        },
                        None => LayerKv { k: gk, v: gv },
                    });
                }
                new_memory.kv = merged;
                new_memory.positions.extend_from_slice(&gist_positions);
                new_memory.gist_entries += gist_rows_abs.len();
            }
        }
        MemoryKind::None => {
            // Full attention: every entry's KV persists.
            let mut merged = Vec::with_capacity(config.layers);
            for (li, kv) in out.new_kv.iter().enumerate() {
                merged.push(match new_memory.kv.get(li) {
                    Some(m) => LayerKv {
                        k: graph.concat_rows(m.k, kv.k)?,
                        v: graph.concat_rows(m.v, kv.v)?,
                    },
                    None => *kv,
                });
            }
            new_memory.kv = merged;
            new_memory.positions.extend_from_slice(&layout.positions);
        }
    }
    new_memory.next_position = layout.positions.last().expect("nonempty") + 1;

    let trace = SegmentTrace {
        seg_kv: out.new_kv,
        last_hidden: out.last_hidden,
        gist_rows: gist_rows_abs.iter().map(|&r| r as usize).collect(),
        coverage: layout.coverage.clone(),
        gist_positions,
    };
    Ok(SegmentStep {
        raw_logits,
        prefix_boot,
        trace,
        memory: new_memory,
    })
}

/// Compress a whole document, returning next-token logits for every scored
/// position, the gist trace, and the final memory.
pub fn compress_document(
    graph: &mut Graph,
    config: &ModelConfig,
    bound: &BoundModel,
    spec: &CompressionSpec,
    tokens: &[u32],
) -> Result<DocumentResult> {
    let plan = segment_input(tokens.len(), spec.segment_len)?;
    let (mut memory, boot) = begin_document(graph, config, bound, spec)?;
    let mut trace = GistTrace::default();
    let mut logit_chunks: Vec<TensorId> = Vec::new();
    let mut boot = boot;
    for range in plan.iter() {
        let segment = &tokens[range.clone()];
        let layout = match spec.memory {
            MemoryKind::None => GistLayout::raw_only(segment, memory.next_position),
            _ => insert_gists(segment, spec, range.start, memory.next_position)?,
        };
        let step = step_segment(graph, config, bound, spec, memory, &layout)?;
        memory = step.memory;
        // The recurrent kind runs its sinks inside the first segment's
        // re-fed prefix rather than in a separate document-start forward.
        if boot.is_none() {
            boot = step.prefix_boot;
        }
        trace.segments.push(step.trace);
        logit_chunks.push(step.raw_logits);
    }

    let mut score = match boot {
        Some(b) => {
            let mut acc = b;
            for chunk in &logit_chunks {
                acc = graph.concat_rows(acc, *chunk)?;
            }
            acc
        }
        None => {
            let mut acc = logit_chunks[0];
            for chunk in &logit_chunks[1..] {
                acc = graph.concat_rows(acc, *chunk)?;
            }
            acc
        }
    };
    let scored_from = if boot.is_some() { 0 } else { 1 };
    // Rows now cover predictions for tokens[scored_from..] plus one trailing
    // prediction past the end of the document; trim it.
    let keep = tokens.len() - scored_from;
    let rows: Vec<u32> = (0..keep as u32).collect();
    score = graph.gather_rows(score, &rows)?;
    Ok(DocumentResult {
        score_logits: score,
        scored_from,
        trace,
        memory,
    })
}

/// Compressed attention span after processing `n` tokens with segment length
/// `segment_len` and ratio `ratio` (`None` means no compression): the final
/// segment stays raw and everything before it shrinks by the ratio.
pub fn effective_length(n: usize, segment_len: usize, ratio: Option<usize>) -> Result<usize> {
    if n < segment_len {
        return Err(invalid(alloc::format!(
            "effective_length requires n >= segment_len, got {n} < {segment_len}"
        )));
    }
    let r = ratio.unwrap_or(1);
    if r == 0 {
        return Err(invalid("ratio must be positive"));
    }
    Ok((n - segment_len) / r + segment_len)
}
