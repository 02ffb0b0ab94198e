//! Experiment configuration: one JSON file per experiment, fully explicit on
//! save, with unknown keys rejected loudly. CLI flags override single fields.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use minigist_core::gist::{CompressionSpec, Granularity, MemoryKind};
use minigist_core::model::ModelConfig;
use minigist_core::train::TrainConfig;
use minigist_core::vocab::Vocab;

use crate::hash_hex;

/// Architecture under experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Full,
    CoarseRec,
    CoarseKv,
    FineKv,
}

impl ArchKind {
    pub fn spec(self, segment_len: usize, ratio: Option<usize>, sink_count: usize) -> CompressionSpec {
        match self {
            ArchKind::Full => CompressionSpec::full_attention(segment_len, sink_count),
            ArchKind::CoarseRec => CompressionSpec {
                memory: MemoryKind::Recurrent,
                granularity: Granularity::Coarse,
                ratio,
                segment_len,
                sink_count,
            },
            ArchKind::CoarseKv => CompressionSpec {
                memory: MemoryKind::Kv,
                granularity: Granularity::Coarse,
                ratio,
                segment_len,
                sink_count,
            },
            ArchKind::FineKv => CompressionSpec {
                memory: MemoryKind::Kv,
                granularity: Granularity::Fine,
                ratio,
                segment_len,
                sink_count,
            },
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "full" => ArchKind::Full,
            "coarse-rec" => ArchKind::CoarseRec,
            "coarse-kv" => ArchKind::CoarseKv,
            "fine-kv" => ArchKind::FineKv,
            other => bail!("unknown architecture {other:?}; expected full, coarse-rec, coarse-kv, or fine-kv"),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Full => "full",
            ArchKind::CoarseRec => "coarse-rec",
            ArchKind::CoarseKv => "coarse-kv",
            ArchKind::FineKv => "fine-kv",
        }
    }
}

/// Synthetic corpus parameters. Training documents come from an infinite
/// seeded stream (every step sees fresh text); set `corpus_file` to train
/// from a gen-data file instead, sampling documents with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub doc_len: usize,
    /// Optional path to an lm-corpus JSONL file; overrides the generator.
    pub corpus_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub arch: ArchKind,
    pub segment_len: usize,
    /// Ratio used by evaluation commands (training samples from train.ratios).
    pub eval_ratio: usize,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    /// Checkpoint directory of a frozen full-attention reference (TIE).
    pub reference_checkpoint: Option<String>,
    pub out_dir: String,
    /// Steps between checkpoints; a final checkpoint is always written.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Default desk scale: ~2M parameters, trains in CPU-hours.
        let vocab = Vocab::toy().size();
        Self {
            model: ModelConfig {
                vocab_size: vocab.max(256),
                layers: 4,
                heads: 4,
                model_dim: 128,
                ffn_dim: 256,
                max_position: 65_536,
                sink_count: 4,
                gist_slots: 1,
                rope_base: 10_000.0,
            },
            arch: ArchKind::FineKv,
            segment_len: 256,
            eval_ratio: 4,
            train: TrainConfig {
                steps: 2000,
                batch_size: 8,
                ..TrainConfig::default()
            },
            corpus: CorpusConfig {
                seed: 0,
                doc_len: 1024,
                corpus_file: None,
            },
            reference_checkpoint: None,
            out_dir: "runs/default".to_string(),
            checkpoint_every: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.train.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let spec = self.spec(Some(self.eval_ratio));
        spec.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        if self.arch != ArchKind::Full {
            for &r in &self.train.ratios {
                self.spec(Some(r))
                    .validate()
                    .map_err(|e| anyhow::anyhow!("ratio {r}: {e}"))?;
            }
        }
        if self.checkpoint_every == 0 {
            bail!("checkpoint_every must be positive");
        }
        if self.corpus.doc_len < self.segment_len {
            bail!("doc_len must cover at least one segment");
        }
        if self.train.tie.is_some() && self.reference_checkpoint.is_none() {
            bail!("TIE training requires reference_checkpoint");
        }
        Ok(())
    }

    /// The compression spec for this experiment at a given ratio.
    pub fn spec(&self, ratio: Option<usize>) -> CompressionSpec {
        let ratio = if self.arch == ArchKind::Full { None } else { ratio };
        self.arch.spec(self.segment_len, ratio, self.model.sink_count)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    /// Save with every field explicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing config {}", path.display()))?;
        Ok(())
    }

    /// Stable content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
