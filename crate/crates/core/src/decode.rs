//! Incremental decoding with on-the-fly compression.
//!
//! A [`Generator`] feeds tokens one chunk at a time, inserting gist entries
//! at group boundaries and compressing whole segments as they fill, exactly
//! as the batch path in [`crate::gist`] lays them out: generated raw tokens
//! append to the current segment, and when it reaches the segment length its
//! gists move to memory while its raw entries are dropped. Forward chunks run
//! through the same model code as training, against a detached KV cache, so
//! teacher-forced decoding reproduces the batch logits.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::gist::{CompressionSpec, DetachedMemory, Granularity, MemoryKind};
use crate::graph::{AttentionMask, Graph};
use crate::model::{forward, BoundModel, ForwardRequest, LayerKv, LayerKvData, ModelConfig, ModelParams};
use crate::tensor::TensorData;

struct LayerBuf {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// KV rows for the current (uncompressed) segment, plus the re-fed prefix for
/// the recurrent kind.
struct LocalCache {
    layers: Vec<LayerBuf>,
    positions: Vec<u32>,
    /// Rows holding gist entries, in insertion order.
    gist_rows: Vec<usize>,
    /// Gist positions matching `gist_rows`.
    gist_positions: Vec<u32>,
}

impl LocalCache {
    fn new(layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerBuf {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            positions: Vec::new(),
            gist_rows: Vec::new(),
            gist_positions: Vec::new(),
        }
    }

    fn rows(&self) -> usize {
        self.positions.len()
    }

    fn clear(&mut self) {
        for l in &mut self.layers {
            l.k.clear();
            l.v.clear();
        }
        self.positions.clear();
        self.gist_rows.clear();
        self.gist_positions.clear();
    }

    fn append(&mut self, kv: &[LayerKvData], positions: &[u32], gist: bool) {
        let base = self.rows();
        for (buf, layer) in self.layers.iter_mut().zip(kv) {
            buf.k.extend_from_slice(layer.k.data());
            buf.v.extend_from_slice(layer.v.data());
        }
        for (i, &p) in positions.iter().enumerate() {
            if gist {
                self.gist_rows.push(base + i);
                self.gist_positions.push(p);
            }
            self.positions.push(p);
        }
    }
}

struct ChunkOut {
    kv: Vec<LayerKvData>,
    hidden: TensorData,
    logits: TensorData,
}

/// Stateful autoregressive decoder for one document.
pub struct Generator<'a> {
    config: &'a ModelConfig,
    params: &'a ModelParams,
    spec: CompressionSpec,
    memory: DetachedMemory,
    local: LocalCache,
    raw_in_segment: usize,
    next_position: u32,
    last_logits: Option<Vec<f32>>,
}

impl<'a> Generator<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ModelParams, spec: CompressionSpec) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if spec.sink_count != config.sink_count {
            return Err(invalid("spec sink_count must match the model"));
        }
        let mut gen = Self {
            config,
            params,
            spec,
            memory: DetachedMemory::new(spec.memory),
            local: LocalCache::new(config.layers),
            raw_in_segment: 0,
            next_position: spec.sink_count as u32,
            last_logits: None,
        };
        // KV kinds run the sinks once at document start; the recurrent kind
        // re-feeds them inside every segment prefix instead.
        if spec.sink_count > 0 && spec.memory != MemoryKind::Recurrent {
            let embeds = gen.params.sink_embed.clone();
            let positions: Vec<u32> = (0..spec.sink_count as u32).collect();
            let out = gen.run_chunk(embeds, &positions, false)?;
            gen.memory.kv = out.kv;
            gen.memory.positions = positions;
        }
        Ok(gen)
    }

    pub fn spec(&self) -> &CompressionSpec {
        &self.spec
    }

    pub fn memory(&self) -> &DetachedMemory {
        &self.memory
    }

    /// Logits predicting the token after everything fed so far.
    pub fn logits(&self) -> Result<&[f32]> {
        self.last_logits
            .as_deref()
            .ok_or_else(|| invalid("no raw token has been fed yet"))
    }

    /// Feed raw tokens (prompt or forced continuation).
    pub fn push_tokens(&mut self, tokens: &[u32]) -> Result<()> {
        let mut rest = tokens;
        while !rest.is_empty() {
            self.ensure_segment_started()?;
            let chunk_len = rest.len().min(self.distance_to_boundary());
            let (chunk, tail) = rest.split_at(chunk_len);
            self.forward_raw_chunk(chunk)?;
            rest = tail;
            self.handle_boundaries()?;
        }
        Ok(())
    }

    /// Greedy-decode up to `max_tokens`, optionally stopping on a token.
    pub fn generate_greedy(&mut self, max_tokens: usize, stop: Option<u32>) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            let next = argmax(self.logits()?);
            if Some(next) == stop {
                break;
            }
            out.push(next);
            self.push_tokens(&[next])?;
        }
        Ok(out)
    }

    /// Raw tokens until the next structural boundary (gist insertion or
    /// segment end).
    fn distance_to_boundary(&self) -> usize {
        let to_segment_end = self.spec.segment_len - self.raw_in_segment;
        match (self.spec.memory, self.spec.granularity, self.spec.ratio) {
            (MemoryKind::None, _, _) => to_segment_end,
            (_, Granularity::Fine, Some(r)) => {
                let to_group = r - (self.raw_in_segment % r);
                to_group.min(to_segment_end)
            }
            _ => to_segment_end,
        }
    }

    /// Recurrent kind: start a fresh segment by re-feeding sinks plus all
    /// accumulated gist hiddens as input embeddings (their KV is recomputed).
    fn ensure_segment_started(&mut self) -> Result<()> {
        if self.spec.memory != MemoryKind::Recurrent || self.local.rows() > 0 {
            return Ok(());
        }
        let s = self.spec.sink_count;
        let d = self.config.model_dim;
        let hidden_rows = self.memory.hidden.as_ref().map_or(0, |h| h.rows());
        let mut data = Vec::with_capacity((s + hidden_rows) * d);
        data.extend_from_slice(self.params.sink_embed.data());
        if let Some(h) = &self.memory.hidden {
            data.extend_from_slice(h.data());
        }
        if data.is_empty() {
            return Ok(());
        }
        let embeds = TensorData::new([s + hidden_rows, d], data)?;
        let mut positions: Vec<u32> = (0..s as u32).collect();
        positions.extend_from_slice(&self.memory.positions);
        let out = self.run_chunk(embeds, &positions, false)?;
        self.local.append(&out.kv, &positions, false);
        Ok(())
    }

    fn forward_raw_chunk(&mut self, tokens: &[u32]) -> Result<()> {
        let d = self.config.model_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(invalid(alloc::format!("token {t} out of vocabulary")));
            }
            data.extend_from_slice(self.params.token_embed.row(t as usize));
        }
        let embeds = TensorData::new([tokens.len(), d], data)?;
        let positions: Vec<u32> = (0..tokens.len() as u32)
            .map(|i| self.next_position + i)
            .collect();
        let out = self.run_chunk(embeds, &positions, false)?;
        self.next_position += tokens.len() as u32;
        self.raw_in_segment += tokens.len();
        self.last_logits = Some(out.logits.row(tokens.len() - 1).to_vec());
        if self.spec.memory == MemoryKind::None {
            // Full attention: raw KV goes straight into memory.
            append_kv(&mut self.memory, &out.kv, &positions);
        } else {
            self.local.append(&out.kv, &positions, false);
        }
        Ok(())
    }

    /// Insert gists and compress the segment when their boundaries are hit.
    fn handle_boundaries(&mut self) -> Result<()> {
        match self.spec.memory {
            MemoryKind::None => {
                if self.raw_in_segment == self.spec.segment_len {
                    self.raw_in_segment = 0;
                }
                Ok(())
            }
            MemoryKind::Kv | MemoryKind::Recurrent => {
                let r = self.spec.ratio.expect("validated");
                if self.spec.granularity == Granularity::Fine
                    && self.raw_in_segment > 0
                    && self.raw_in_segment % r == 0
                {
                    let slot = self.raw_in_segment / r - 1;
                    // Skip if this group's gist was already inserted (chunk
                    // boundaries always land exactly on group boundaries).
                    let expected_gists = self.raw_in_segment / r;
                    if self.local.gist_rows.len() < expected_gists {
                        self.forward_gists(&[slot])?;
                    }
                }
                if self.raw_in_segment == self.spec.segment_len {
                    if self.spec.granularity == Granularity::Coarse {
                        let t = self.spec.gists_per_segment();
                        let slots: Vec<usize> = (0..t).collect();
                        let hidden = self.forward_gists(&slots)?;
                        self.harvest_segment(Some(hidden))?;
                    } else {
                        self.harvest_segment(None)?;
                    }
                    self.raw_in_segment = 0;
                }
                Ok(())
            }
        }
    }

    /// Forward gist entries; returns their final hidden states (used by the
    /// recurrent harvest). A fine gist shares its last covered raw token's
    /// position; coarse gists take the slots after the segment.
    fn forward_gists(&mut self, slots: &[usize]) -> Result<TensorData> {
        let d = self.config.model_dim;
        let mut data = Vec::with_capacity(slots.len() * d);
        for &slot in slots {
            data.extend_from_slice(self.params.gist_embed.row(slot % self.config.gist_slots));
        }
        let embeds = TensorData::new([slots.len(), d], data)?;
        let positions: Vec<u32> = match self.spec.granularity {
            Granularity::Fine => vec![self.next_position - 1; slots.len()],
            Granularity::Coarse => (0..slots.len() as u32)
                .map(|i| self.next_position + i)
                .collect(),
        };
        let out = self.run_chunk(embeds, &positions, true)?;
        if self.spec.granularity == Granularity::Coarse {
            self.next_position += slots.len() as u32;
        }
        self.local.append(&out.kv, &positions, true);
        Ok(out.hidden)
    }

    /// Move the segment's compressed entries into memory and drop raw rows.
    fn harvest_segment(&mut self, gist_hidden: Option<TensorData>) -> Result<()> {
        let t = self.local.gist_rows.len();
        match self.spec.memory {
            MemoryKind::Kv => {
                let d = self.config.model_dim;
                for (mem_idx, buf) in self.local.layers.iter().enumerate() {
                    let mut k = Vec::with_capacity(t * d);
                    let mut v = Vec::with_capacity(t * d);
                    for &row in &self.local.gist_rows {
                        k.extend_from_slice(&buf.k[row * d..(row + 1) * d]);
                        v.extend_from_slice(&buf.v[row * d..(row + 1) * d]);
                    }
                    let k = TensorData::new([t, d], k)?;
                    let v = TensorData::new([t, d], v)?;
                    if mem_idx < self.memory.kv.len() {
                        extend_layer(&mut self.memory.kv[mem_idx], &k, &v);
                    } else {
                        self.memory.kv.push(LayerKvData { k, v });
                    }
                }
                let gist_positions = self.local.gist_positions.clone();
                self.memory.positions.extend_from_slice(&gist_positions);
                self.memory.gist_entries += t;
            }
            MemoryKind::Recurrent => {
                let hidden = gist_hidden
                    .ok_or_else(|| invalid("recurrent harvest requires gist hidden states"))?;
                let d = self.config.model_dim;
                match &mut self.memory.hidden {
                    Some(h) => {
                        let mut data = h.data().to_vec();
                        data.extend_from_slice(hidden.data());
                        *h = TensorData::new([h.rows() + hidden.rows(), d], data)?;
                    }
                    None => self.memory.hidden = Some(hidden),
                }
                self.memory
                    .positions
                    .extend_from_slice(&self.local.gist_positions);
                self.memory.gist_entries += t;
            }
            MemoryKind::None => unreachable!("full attention never harvests"),
        }
        self.memory.next_position = self.next_position;
        self.local.clear();
        Ok(())
    }

    /// One forward over the shared model path: keys are the detached memory
    /// (KV kinds) followed by the local segment cache. Raw queries must not
    /// see the current segment's gist rows; `queries_are_gists` lifts that
    /// restriction for gist chunks.
    fn run_chunk(
        &self,
        embeds: TensorData,
        positions: &[u32],
        queries_are_gists: bool,
    ) -> Result<ChunkOut> {
        let t = embeds.rows();
        let d = self.config.model_dim;
        let mut graph = Graph::new();
        let bound = BoundModel::bind(&mut graph, self.params, false);

        let compressed_rows = match self.spec.memory {
            MemoryKind::Recurrent => 0,
            _ => self.memory.entries(),
        };
        let mem_rows = compressed_rows + self.local.rows();
        let mut memory_ids: Vec<LayerKv> = Vec::with_capacity(self.config.layers);
        if mem_rows > 0 {
            for li in 0..self.config.layers {
                let mut k = Vec::with_capacity(mem_rows * d);
                let mut v = Vec::with_capacity(mem_rows * d);
                if self.spec.memory != MemoryKind::Recurrent {
                    if let Some(layer) = self.memory.kv.get(li) {
                        k.extend_from_slice(layer.k.data());
                        v.extend_from_slice(layer.v.data());
                    }
                }
                k.extend_from_slice(&self.local.layers[li].k);
                v.extend_from_slice(&self.local.layers[li].v);
                memory_ids.push(LayerKv {
                    k: graph.leaf(TensorData::new([mem_rows, d], k)?),
                    v: graph.leaf(TensorData::new([mem_rows, d], v)?),
                });
            }
        }
        let keys = mem_rows + t;
        let mut allow = vec![true; t * keys];
        if !queries_are_gists {
            // Same-segment gist rows are invisible to raw queries; compressed
            // memory (sinks and earlier segments' gists) is always visible.
            for &gist_row in &self.local.gist_rows {
                let col = compressed_rows + gist_row;
                for i in 0..t {
                    allow[i * keys + col] = false;
                }
            }
        }
        for i in 0..t {
            for j in (i + 1)..t {
                allow[i * keys + mem_rows + j] = false;
            }
        }
        let mask = alloc::sync::Arc::new(AttentionMask::new(t, keys, allow)?);
        let embeds = graph.leaf(embeds);
        let out = forward(
            &mut graph,
            self.config,
            &bound,
            &ForwardRequest {
                embeds,
                positions,
                memory: (mem_rows > 0).then_some(memory_ids.as_slice()),
                mask: &mask,
            },
        )?;
        Ok(ChunkOut {
            kv: out
                .new_kv
                .iter()
                .map(|kv| LayerKvData {
                    k: graph.to_tensor(kv.k),
                    v: graph.to_tensor(kv.v),
                })
                .collect(),
            hidden: graph.to_tensor(out.last_hidden),
            logits: graph.to_tensor(out.logits),
        })
    }
}

fn extend_layer(layer: &mut LayerKvData, k: &TensorData, v: &TensorData) {
    let d = k.cols();
    let mut kd = layer.k.data().to_vec();
    kd.extend_from_slice(k.data());
    let mut vd = layer.v.data().to_vec();
    vd.extend_from_slice(v.data());
    let rows = layer.k.rows() + k.rows();
    layer.k = TensorData::new([rows, d], kd).expect("consistent dims");
    layer.v = TensorData::new([rows, d], vd).expect("consistent dims");
}

fn append_kv(memory: &mut DetachedMemory, kv: &[LayerKvData], positions: &[u32]) {
    for (li, layer) in kv.iter().enumerate() {
        if li < memory.kv.len() {
            extend_layer(&mut memory.kv[li], &layer.k, &layer.v);
        } else {
            memory.kv.push(layer.clone());
        }
    }
    memory.positions.extend_from_slice(positions);
    memory.next_position = positions.last().map_or(memory.next_position, |&p| p + 1);
}

/// Deterministic argmax: lowest index wins ties.
pub fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if x > best_val {
            best_val = x;
            best = i;
        }
    }
    best as u32
}
