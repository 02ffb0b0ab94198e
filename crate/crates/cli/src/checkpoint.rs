//! Checkpoints: a JSON manifest plus one raw blob of little-endian f32s.
//!
//! The manifest addresses every named tensor (parameters and Adam moments) by
//! byte offset, and records the training step, config hash, and RNG state, so
//! a resumed run reproduces the uninterrupted loss trace bitwise. Version and
//! config mismatches are rejected before any state is touched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use minigist_core::rng::Rng;
use minigist_core::train::Trainer;

use crate::hash_hex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub config_hash: String,
    pub rng_state: u64,
    pub adam_t: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn blob_path(dir: &Path) -> PathBuf {
    dir.join("params.bin")
}

pub fn exists(dir: &Path) -> bool {
    manifest_path(dir).is_file() && blob_path(dir).is_file()
}

/// Named tensors in checkpoint order: model, decoder, then Adam moments.
fn collect_tensors(trainer: &Trainer) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    trainer
        .params
        .visit(&mut |name, t| out.push((name, t.shape().to_vec(), t.data().to_vec())));
    trainer
        .decoder
        .visit(&mut |name, t| out.push((name, t.shape().to_vec(), t.data().to_vec())));
    let names: Vec<String> = out.iter().map(|(n, _, _)| n.clone()).collect();
    let (m, v) = trainer.opt.state();
    for (i, slot) in m.iter().enumerate() {
        out.push((format!("adam.m.{}", names[i]), vec![slot.len()], slot.clone()));
    }
    for (i, slot) in v.iter().enumerate() {
        out.push((format!("adam.v.{}", names[i]), vec![slot.len()], slot.clone()));
    }
    out
}

pub fn save(dir: &Path, trainer: &Trainer, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tensors = collect_tensors(trainer);
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in &tensors {
        let offset = blob.len() as u64;
        for &x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: trainer.step,
        config_hash: config_hash.to_string(),
        rng_state: trainer.rng.state(),
        adam_t: trainer.opt.t,
        tensors: entries,
    };
    // Blob first: a manifest never refers to a missing blob on crash.
    fs::write(blob_path(dir), &blob)?;
    fs::write(manifest_path(dir), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub struct Loaded {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest_text = fs::read_to_string(manifest_path(dir))
        .with_context(|| format!("reading {}", manifest_path(dir).display()))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != FORMAT_VERSION {
        bail!(
            "checkpoint format v{} is incompatible with this build (v{FORMAT_VERSION})",
            manifest.format_version
        );
    }
    let blob = fs::read(blob_path(dir))?;
    let mut tensors = BTreeMap::new();
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for entry in &manifest.tensors {
        let bytes = entry.len as u64 * 4;
        let end = entry.offset + bytes;
        if end > blob.len() as u64 {
            bail!("tensor {} overruns the blob", entry.name);
        }
        spans.push((entry.offset, end));
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            bail!("tensor {} shape does not match its length", entry.name);
        }
        let mut data = Vec::with_capacity(entry.len);
        let base = entry.offset as usize;
        for i in 0..entry.len {
            let b = &blob[base + 4 * i..base + 4 * i + 4];
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        tensors.insert(entry.name.clone(), (entry.shape.clone(), data));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            bail!("checkpoint tensors overlap in the blob");
        }
    }
    Ok(Loaded { manifest, tensors })
}

/// Restore a trainer's parameters, optimizer state, step, and RNG from a
/// checkpoint. The config hash must match.
pub fn restore(trainer: &mut Trainer, dir: &Path, config_hash: &str) -> Result<()> {
    let loaded = load(dir)?;
    if loaded.manifest.config_hash != config_hash {
        bail!(
            "checkpoint was written under config {} but the current config hashes to {}",
            loaded.manifest.config_hash,
            config_hash
        );
    }
    let mut names: Vec<String> = Vec::new();
    let mut restore_err: Option<anyhow::Error> = None;
    {
        let tensors = &loaded.tensors;
        let mut put = |name: String, t: &mut minigist_core::tensor::TensorData| {
            if restore_err.is_some() {
                return;
            }
            match tensors.get(&name) {
                Some((shape, data)) if shape == &t.shape().to_vec() => {
                    t.data_mut().copy_from_slice(data);
                    names.push(name);
                }
                Some((shape, _)) => {
                    restore_err = Some(anyhow::anyhow!(
                        "tensor {name} has shape {shape:?}, expected {:?}",
                        t.shape()
                    ));
                }
                None => {
                    restore_err = Some(anyhow::anyhow!("checkpoint is missing tensor {name}"));
                }
            }
        };
        trainer.params.visit_mut(&mut |name, t| put(name, t));
        trainer.decoder.visit_mut(&mut |name, t| put(name, t));
    }
    if let Some(err) = restore_err {
        return Err(err);
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for name in &names {
        let (_, dm) = loaded
            .tensors
            .get(&format!("adam.m.{name}"))
            .with_context(|| format!("missing adam.m.{name}"))?;
        let (_, dv) = loaded
            .tensors
            .get(&format!("adam.v.{name}"))
            .with_context(|| format!("missing adam.v.{name}"))?;
        m.push(dm.clone());
        v.push(dv.clone());
    }
    trainer
        .opt
        .restore(loaded.manifest.adam_t, m, v)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    trainer.step = loaded.manifest.step;
    trainer.rng = Rng::from_state(loaded.manifest.rng_state);
    Ok(())
}

/// Content hash over manifest and blob bytes, for report provenance.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut bytes = fs::read(manifest_path(dir))?;
    bytes.extend(fs::read(blob_path(dir))?);
    Ok(hash_hex(&bytes))
}
