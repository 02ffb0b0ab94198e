//! Training and evaluation orchestration over run directories.
//!
//! A run directory holds `config.json`, `checkpoint/` (latest state),
//! `metrics.jsonl`, and `reports/`. Training is resumable and idempotent:
//! re-running a finished config is a no-op, and a killed run continues
//! bitwise from its last checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use minigist_core::model::{ModelConfig, ModelParams};
use minigist_core::probe::{
    boundary_decile_pairs, boundary_profile, perplexity, prefix_recall_hits, reconstruct_probe,
    sub_em_hits, train_probe_decoder, truncated_context_eval, window_mean_nlls, DecoderStrength,
    ProbeReport, RecallCase,
};
use minigist_core::rng::Rng;
use minigist_core::stats::{mean, paired_sign_test, SignTest};
use minigist_core::train::{GistDecoder, Trainer};
use minigist_core::vocab::Vocab;

use crate::checkpoint;
use crate::config::{ArchKind, ExperimentConfig};
use crate::data;
use crate::report::{write_csv, write_jsonl, MetricRow};

pub fn checkpoint_dir(run: &Path) -> PathBuf {
    run.join("checkpoint")
}

pub fn metrics_path(run: &Path) -> PathBuf {
    run.join("metrics.jsonl")
}

pub fn reports_dir(run: &Path) -> PathBuf {
    run.join("reports")
}

pub fn config_path(run: &Path) -> PathBuf {
    run.join("config.json")
}

/// File-backed training corpus, when configured.
pub fn train_corpus(config: &ExperimentConfig) -> Result<Option<Vec<Vec<u32>>>> {
    match &config.corpus.corpus_file {
        Some(path) => {
            let (_, docs) = data::load_lm_corpus(Path::new(path))?;
            if docs.is_empty() {
                bail!("corpus file {path} holds no documents");
            }
            Ok(Some(docs))
        }
        None => Ok(None),
    }
}

/// The training batch for one step: fresh stream documents (synthetic mode)
/// or a seeded sample from the file corpus. Stateless in the step number, so
/// resumed runs see identical batches.
pub fn train_batch(
    config: &ExperimentConfig,
    file_corpus: &Option<Vec<Vec<u32>>>,
    step: usize,
) -> Vec<Vec<u32>> {
    match file_corpus {
        Some(docs) => {
            let idx = batch_indices(
                config.train.seed,
                step,
                docs.len(),
                config.train.batch_size,
            );
            idx.into_iter().map(|i| docs[i].clone()).collect()
        }
        None => (0..config.train.batch_size)
            .map(|j| {
                let index = (step * config.train.batch_size + j) as u64;
                data::stream_doc(config.corpus.seed, index, config.corpus.doc_len)
            })
            .collect(),
    }
}

/// Held-out corpus stream for perplexity, derived from a disjoint seed.
pub fn eval_corpus(config: &ExperimentConfig, docs: usize) -> Vec<Vec<u32>> {
    data::lm_corpus(
        config.corpus.seed ^ 0x6576_616c, // "eval"
        docs,
        config.corpus.doc_len,
    )
}

/// Third disjoint stream, used to train probe decoders.
pub fn probe_corpus(config: &ExperimentConfig, docs: usize) -> Vec<Vec<u32>> {
    data::lm_corpus(
        config.corpus.seed ^ 0x7072_6f62, // "prob"
        docs,
        config.corpus.doc_len,
    )
}

/// Deterministic batch selection: depends only on (seed, step).
pub fn batch_indices(seed: u64, step: usize, corpus_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = Rng::derive(seed, 0x6261_7463 ^ step as u64); // "batc"
    (0..batch_size).map(|_| rng.below(corpus_len)).collect()
}

/// Load the frozen reference model for TIE from another run directory.
pub fn load_reference(run: &Path) -> Result<(ModelConfig, ModelParams)> {
    let config = ExperimentConfig::load(&config_path(run))?;
    if config.arch != ArchKind::Full {
        bail!("TIE reference must be a full-attention run, found {}", config.arch.name());
    }
    let (params, _) = load_model(run)?;
    Ok((config.model, params))
}

/// Load a run's trained parameters and AE decoder from its checkpoint.
pub fn load_model(run: &Path) -> Result<(ModelParams, GistDecoder)> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let dir = checkpoint_dir(run);
    if !checkpoint::exists(&dir) {
        bail!("run {} has no checkpoint", run.display());
    }
    let mut trainer = build_trainer(&config)?;
    checkpoint::restore(&mut trainer, &dir, &config.hash())?;
    Ok((trainer.params, trainer.decoder))
}

pub fn build_trainer(config: &ExperimentConfig) -> Result<Trainer> {
    let reference = match (&config.train.tie, &config.reference_checkpoint) {
        (Some(_), Some(path)) => Some(load_reference(Path::new(path))?),
        (Some(_), None) => bail!("TIE requires reference_checkpoint"),
        _ => None,
    };
    let arch = config.spec(Some(config.eval_ratio));
    Trainer::new(config.model.clone(), arch, config.train.clone(), reference)
        .map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Debug, Serialize)]
struct MetricsRecord {
    step: usize,
    lm_loss: f64,
    ae_loss: f64,
    total: f64,
    lr: f32,
    ratio_hist: std::collections::BTreeMap<usize, usize>,
}

/// Drop metrics lines recorded after `step` (a resumed run replays them).
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let content = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in content.lines() {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let line_step = value["step"].as_u64().unwrap_or(u64::MAX) as usize;
        if line_step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run: PathBuf,
    pub final_step: usize,
    pub last_total: f64,
}

/// Train a config inside its run directory. Resumes from the newest
/// checkpoint when present; returns immediately if the run already finished.
pub fn run_train(config: &ExperimentConfig, quiet: bool) -> Result<TrainOutcome> {
    run_train_session(config, quiet, None)
}

/// As [`run_train`], but stop after at most `session_steps` optimizer steps
/// in this invocation. Checkpoints are only written at the regular cadence,
/// so a bounded session behaves exactly like a run killed mid-flight.
pub fn run_train_session(
    config: &ExperimentConfig,
    quiet: bool,
    session_steps: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let run = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&run)?;
    let hash = config.hash();
    if config_path(&run).is_file() {
        let existing = ExperimentConfig::load(&config_path(&run))?;
        if existing.hash() != hash {
            bail!(
                "run directory {} already holds a different config; refusing to mix runs",
                run.display()
            );
        }
    } else {
        config.save(&config_path(&run))?;
    }

    let file_corpus = train_corpus(config)?;
    let mut trainer = build_trainer(config)?;
    let ckpt = checkpoint_dir(&run);
    if checkpoint::exists(&ckpt) {
        checkpoint::restore(&mut trainer, &ckpt, &hash)?;
        truncate_metrics(&metrics_path(&run), trainer.step)?;
    }
    if trainer.step >= config.train.steps {
        return Ok(TrainOutcome {
            run,
            final_step: trainer.step,
            last_total: f64::NAN,
        });
    }

    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(metrics_path(&run))?;
    let mut last_total = f64::NAN;
    let session_end = session_steps.map(|n| trainer.step + n).unwrap_or(usize::MAX);
    while trainer.step < config.train.steps && trainer.step < session_end {
        let step = trainer.step;
        let docs = train_batch(config, &file_corpus, step);
        let batch: Vec<&[u32]> = docs.iter().map(|d| d.as_slice()).collect();
        let metrics = trainer.train_step(&batch).map_err(|e| anyhow::anyhow!("{e}"))?;
        last_total = metrics.total;
        let mut hist = std::collections::BTreeMap::new();
        for r in &metrics.ratios {
            *hist.entry(*r).or_insert(0usize) += 1;
        }
        let record = MetricsRecord {
            step: metrics.step,
            lm_loss: metrics.lm_loss,
            ae_loss: metrics.ae_loss,
            total: metrics.total,
            lr: metrics.lr,
            ratio_hist: hist,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&record)?)?;
        if !quiet && (metrics.step % 50 == 0 || metrics.step == config.train.steps) {
            eprintln!(
                "[{}] step {:5} lm {:.4} ae {:.4} lr {:.2e}",
                config.arch.name(),
                metrics.step,
                metrics.lm_loss,
                metrics.ae_loss,
                metrics.lr
            );
        }
        if trainer.step % config.checkpoint_every == 0 || trainer.step == config.train.steps {
            metrics_file.flush()?;
            checkpoint::save(&ckpt, &trainer, &hash)?;
        }
    }
    metrics_file.flush()?;
    if trainer.step >= config.train.steps {
        checkpoint::save(&ckpt, &trainer, &hash)?;
    }
    Ok(TrainOutcome {
        run,
        final_step: trainer.step,
        last_total,
    })
}

// ---------------------------------------------------------------------------
// Evaluation suites
// ---------------------------------------------------------------------------

fn provenance(run: &Path, config: &ExperimentConfig) -> Result<(String, String)> {
    Ok((config.hash(), checkpoint::content_hash(&checkpoint_dir(run))?))
}

fn metric_row(
    config: &ExperimentConfig,
    hashes: &(String, String),
    ratio: Option<usize>,
    metric: &str,
    value: f64,
) -> MetricRow {
    MetricRow {
        arch: config.arch.name().to_string(),
        ratio: ratio.map_or_else(|| "-".to_string(), |r| r.to_string()),
        metric: metric.to_string(),
        value,
        config_hash: hashes.0.clone(),
        checkpoint_hash: hashes.1.clone(),
    }
}

#[derive(Debug, Serialize)]
struct CaseOutcome {
    suite: &'static str,
    case: usize,
    seed: u64,
    ratio: String,
    detail: serde_json::Value,
}

/// Perplexity on a held-out stream; writes `reports/ppl.csv`.
pub fn suite_ppl(run: &Path, eval_docs: usize, window: usize) -> Result<f64> {
    suite_ppl_at(run, eval_docs, window, None)
}

/// As [`suite_ppl`] with an explicit ratio override.
pub fn suite_ppl_at(run: &Path, eval_docs: usize, window: usize, ratio: Option<usize>) -> Result<f64> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let corpus: Vec<u32> = eval_corpus(&config, eval_docs).concat();
    let spec = config.spec(Some(ratio.unwrap_or(config.eval_ratio)));
    let ppl = perplexity(&config.model, &params, &spec, &corpus, window)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let hashes = provenance(run, &config)?;
    let ratio = spec.ratio;
    let rows = vec![metric_row(&config, &hashes, ratio, "ppl", ppl)];
    write_csv(&reports_dir(run).join("ppl.csv"), &rows)?;
    Ok(ppl)
}

/// Per-window mean NLLs for paired comparisons between runs.
pub fn heldout_window_nlls(run: &Path, eval_docs: usize, window: usize) -> Result<Vec<f64>> {
    heldout_window_nlls_at(run, eval_docs, window, None)
}

pub fn heldout_window_nlls_at(
    run: &Path,
    eval_docs: usize,
    window: usize,
    ratio: Option<usize>,
) -> Result<Vec<f64>> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let corpus: Vec<u32> = eval_corpus(&config, eval_docs).concat();
    let spec = config.spec(Some(ratio.unwrap_or(config.eval_ratio)));
    window_mean_nlls(&config.model, &params, &spec, &corpus, window)
        .map_err(|e| anyhow::anyhow!("{e}"))
}

pub struct BoundaryOutcome {
    pub profile_first_decile: f64,
    pub profile_last_decile: f64,
    pub test: SignTest,
}

/// Within-segment NLL profile plus the paired first-vs-last-decile test;
/// writes `reports/boundary.csv`.
pub fn suite_boundary(run: &Path, eval_docs: usize) -> Result<BoundaryOutcome> {
    suite_boundary_at(run, eval_docs, None)
}

pub fn suite_boundary_at(
    run: &Path,
    eval_docs: usize,
    ratio: Option<usize>,
) -> Result<BoundaryOutcome> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let docs = eval_corpus(&config, eval_docs);
    let spec = config.spec(Some(ratio.unwrap_or(config.eval_ratio)));
    let profile = boundary_profile(&config.model, &params, &spec, &docs)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let pairs = boundary_decile_pairs(&config.model, &params, &spec, &docs)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let first: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let last: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let test = paired_sign_test(&first, &last);
    let decile = (spec.segment_len / 10).max(1);
    let first_mean = mean(&profile.mean_nll[..decile]);
    let last_mean = mean(&profile.mean_nll[spec.segment_len - decile..]);

    let hashes = provenance(run, &config)?;
    let ratio = spec.ratio;
    let mut rows = vec![
        metric_row(&config, &hashes, ratio, "boundary_first_decile_nll", first_mean),
        metric_row(&config, &hashes, ratio, "boundary_last_decile_nll", last_mean),
        metric_row(&config, &hashes, ratio, "boundary_p_value", test.p_value),
    ];
    for (j, &nll) in profile.mean_nll.iter().enumerate() {
        rows.push(metric_row(
            &config,
            &hashes,
            ratio,
            &format!("boundary_offset_{j}"),
            nll,
        ));
    }
    write_csv(&reports_dir(run).join("boundary.csv"), &rows)?;
    Ok(BoundaryOutcome {
        profile_first_decile: first_mean,
        profile_last_decile: last_mean,
        test,
    })
}

pub struct RecallOutcome {
    /// `(k, accuracy)` pairs in ascending `k`.
    pub acc_at: Vec<(usize, f64)>,
    /// Per-case hit rows aligned with `acc_at`.
    pub per_case: Vec<Vec<f64>>,
}

/// 32-digit code recall with first-k prefix scoring; writes
/// `reports/recall.csv` and per-case records.
pub fn suite_uuid_recall(run: &Path, cases: usize, seed: u64) -> Result<RecallOutcome> {
    suite_uuid_recall_at(run, cases, seed, None)
}

pub fn suite_uuid_recall_at(
    run: &Path,
    cases: usize,
    seed: u64,
    ratio: Option<usize>,
) -> Result<RecallOutcome> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let spec = config.spec(Some(ratio.unwrap_or(config.eval_ratio)));
    let case_list = data::uuid_cases(seed, cases, config.corpus.doc_len, config.segment_len, 32);
    let ks = [4usize, 8, 16, 32];
    let per_case = prefix_recall_hits(&config.model, &params, &spec, &case_list, &ks)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let acc_at: Vec<(usize, f64)> = ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            (
                k,
                per_case.iter().map(|h| h[ki]).sum::<f64>() / case_list.len() as f64,
            )
        })
        .collect();
    let hashes = provenance(run, &config)?;
    let ratio = spec.ratio;
    let rows: Vec<MetricRow> = acc_at
        .iter()
        .map(|&(k, acc)| metric_row(&config, &hashes, ratio, &format!("uuid_acc_at_{k}"), acc))
        .collect();
    write_csv(&reports_dir(run).join("recall.csv"), &rows)?;
    let records: Vec<CaseOutcome> = per_case
        .iter()
        .enumerate()
        .map(|(i, hits)| CaseOutcome {
            suite: "uuid-recall",
            case: i,
            seed,
            ratio: rows[0].ratio.clone(),
            detail: serde_json::json!({ "hits": hits }),
        })
        .collect();
    write_jsonl(&reports_dir(run).join("recall_cases.jsonl"), &records)?;
    Ok(RecallOutcome { acc_at, per_case })
}

pub struct SurpriseOutcome {
    pub relevant_acc: f64,
    pub irrelevant_acc: f64,
    /// Per-case hits for (relevant, irrelevant), pooled over needle types.
    pub relevant_hits: Vec<f64>,
    pub irrelevant_hits: Vec<f64>,
}

/// Table-9-style surprise needles; writes `reports/surprise.csv`.
pub fn suite_surprise(run: &Path, cases: usize, seed: u64) -> Result<SurpriseOutcome> {
    suite_surprise_at(run, cases, seed, None)
}

pub fn suite_surprise_at(
    run: &Path,
    cases: usize,
    seed: u64,
    ratio: Option<usize>,
) -> Result<SurpriseOutcome> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let spec = config.spec(Some(ratio.unwrap_or(config.eval_ratio)));
    let case_list = data::surprise_cases(seed, cases, config.corpus.doc_len, config.segment_len);
    let mut relevant: Vec<RecallCase> = Vec::with_capacity(cases * 2);
    let mut irrelevant: Vec<RecallCase> = Vec::with_capacity(cases * 2);
    for case in &case_list {
        relevant.push(case.relevant_word.to_case()?);
        relevant.push(case.relevant_number.to_case()?);
        irrelevant.push(case.irrelevant_word.to_case()?);
        irrelevant.push(case.irrelevant_number.to_case()?);
    }
    let margin = 6;
    let relevant_hits = sub_em_hits(&config.model, &params, &spec, &relevant, margin)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let irrelevant_hits = sub_em_hits(&config.model, &params, &spec, &irrelevant, margin)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let relevant_acc = mean(&relevant_hits);
    let irrelevant_acc = mean(&irrelevant_hits);
    let hashes = provenance(run, &config)?;
    let ratio = spec.ratio;
    let rows = vec![
        metric_row(&config, &hashes, ratio, "surprise_relevant_subem", relevant_acc),
        metric_row(&config, &hashes, ratio, "surprise_irrelevant_subem", irrelevant_acc),
    ];
    write_csv(&reports_dir(run).join("surprise.csv"), &rows)?;
    let records: Vec<CaseOutcome> = relevant_hits
        .iter()
        .zip(&irrelevant_hits)
        .enumerate()
        .map(|(i, (r, ir))| CaseOutcome {
            suite: "surprise-needle",
            case: i,
            seed,
            ratio: rows[0].ratio.clone(),
            detail: serde_json::json!({ "relevant": r, "irrelevant": ir }),
        })
        .collect();
    write_jsonl(&reports_dir(run).join("surprise_cases.jsonl"), &records)?;
    Ok(SurpriseOutcome {
        relevant_acc,
        irrelevant_acc,
        relevant_hits,
        irrelevant_hits,
    })
}

/// Truncated-context recall at `k` (kv-recall cases, needle near the end).
pub fn suite_truncated(run: &Path, cases: usize, seed: u64, k: usize) -> Result<f64> {
    suite_truncated_at(run, cases, seed, k, None)
}

pub fn suite_truncated_at(
    run: &Path,
    cases: usize,
    seed: u64,
    k: usize,
    ratio: Option<usize>,
) -> Result<f64> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let spec = config.spec(Some(ratio.unwrap_or(config.eval_ratio)));
    let case_list = data::kv_cases(seed, cases, config.corpus.doc_len, config.segment_len);
    truncated_context_eval(&config.model, &params, &spec, &case_list, k, 4)
        .map_err(|e| anyhow::anyhow!("{e}"))
}

/// Train a probing decoder on held-out gists and report reconstruction
/// accuracy per ratio; writes `reports/probe_<strength>.csv`.
#[allow(clippy::too_many_arguments)]
pub fn suite_probe(
    run: &Path,
    strength: DecoderStrength,
    ratios: &[usize],
    train_docs: usize,
    eval_docs: usize,
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<ProbeReport> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let arch = config.spec(Some(config.eval_ratio));
    let depth = strength.depth(&config.model);
    let mut decoder = GistDecoder::with_depth(&config.model, ratios, depth, seed);
    let probe_train = probe_corpus(&config, train_docs);
    let probe_eval: Vec<Vec<u32>> = data::lm_corpus(
        config.corpus.seed ^ 0x7065_7661, // probe-eval stream
        eval_docs,
        config.corpus.doc_len,
    );
    train_probe_decoder(
        &config.model,
        &params,
        arch,
        &mut decoder,
        &probe_train,
        steps,
        4,
        lr,
        seed,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let report = reconstruct_probe(
        &config.model,
        &params,
        arch,
        &decoder,
        strength,
        &probe_eval,
        ratios,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let hashes = provenance(run, &config)?;
    let label = match strength {
        DecoderStrength::Weak => "weak",
        DecoderStrength::Strong => "strong",
    };
    let rows: Vec<MetricRow> = report
        .per_ratio
        .iter()
        .map(|&(r, acc)| {
            metric_row(
                &config,
                &hashes,
                Some(r),
                &format!("reconstruction_{label}"),
                acc,
            )
        })
        .collect();
    write_csv(&reports_dir(run).join(format!("probe_{label}.csv")), &rows)?;
    Ok(report)
}

/// Accounting-only cost model: compressed attention span for a context.
pub fn cost_model(tokens: usize, segment_len: usize, ratio: Option<usize>) -> Result<usize> {
    minigist_core::gist::effective_length(tokens, segment_len, ratio)
        .map_err(|e| anyhow::anyhow!("{e}"))
}

/// Decode helper for demos: greedy continuation of a prompt string.
pub fn complete(run: &Path, prompt: &str, tokens: usize) -> Result<String> {
    let config = ExperimentConfig::load(&config_path(run))?;
    let (params, _) = load_model(run)?;
    let spec = config.spec(Some(config.eval_ratio));
    let vocab = Vocab::toy();
    let prompt_tokens = vocab.encode(prompt).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut generator = minigist_core::decode::Generator::new(&config.model, &params, spec)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    generator
        .push_tokens(&prompt_tokens)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let generated = generator
        .generate_greedy(tokens, None)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(vocab.decode(&generated))
}
