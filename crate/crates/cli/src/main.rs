//! `minigist` — train and probe gist-token context compression on toy models.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use minigist_cli::config::{ArchKind, ExperimentConfig};
use minigist_cli::runner;
use minigist_cli::{data, runner::cost_model};
use minigist_core::probe::DecoderStrength;
use minigist_core::stats::paired_sign_test;
use minigist_core::train::TieConfig;

#[derive(Parser)]
#[command(name = "minigist", version, about = "Gist-token context compression on desk-scale models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file (JSONL with a provenance header).
    GenData {
        /// One of: lm-corpus, uuid-recall, surprise-needle, kv-recall.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Documents or cases to generate.
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 1024)]
        context_len: usize,
        #[arg(long, default_value_t = 256)]
        segment_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an experiment (resumes from its checkpoint when present).
    Train {
        /// Experiment config JSON; omit to use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the architecture: full, coarse-rec, coarse-kv, fine-kv.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda_ae: Option<f32>,
        /// Enable TIE reweighting (needs reference_checkpoint in the config).
        #[arg(long)]
        tie: bool,
        #[arg(long)]
        out_dir: Option<String>,
        /// Write the effective config to a path and exit without training.
        #[arg(long)]
        dump_config: Option<PathBuf>,
    },
    /// Sliding-window perplexity on a held-out stream.
    EvalPpl {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 50)]
        eval_docs: usize,
        /// Window length in tokens (defaults to the corpus document length).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Mean NLL per within-segment offset plus the boundary-effect test.
    ProfileBoundary {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 50)]
        eval_docs: usize,
    },
    /// 32-digit code recall scored by first-k prefix match.
    EvalRecall {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Surprise-needle recall (relevant vs. novel subject).
    EvalSurprise {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a probing decoder and report reconstruction accuracy per ratio.
    ProbeReconstruct {
        #[arg(long)]
        run: PathBuf,
        /// weak (one block) or strong (full depth).
        #[arg(long, default_value = "weak")]
        strength: String,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32])]
        ratios: Vec<usize>,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 24)]
        train_docs: usize,
        #[arg(long, default_value_t = 8)]
        eval_docs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run every evaluation suite for a trained run.
    EvalAll {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 50)]
        eval_docs: usize,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compressed attention span for a context length (pure accounting).
    CostModel {
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        segment_len: usize,
        /// Omit for the uncompressed baseline.
        #[arg(long)]
        ratio: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            kind,
            seed,
            size,
            context_len,
            segment_len,
            out,
        } => {
            data::gen_data(&kind, seed, size, context_len, segment_len, &out)?;
            println!("wrote {} ({kind}, seed {seed}, size {size})", out.display());
        }
        Command::Train {
            config,
            arch,
            steps,
            seed,
            lambda_ae,
            tie,
            out_dir,
            dump_config,
        } => {
            let mut config = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(name) = arch {
                config.arch = ArchKind::parse(&name)?;
            }
            if let Some(steps) = steps {
                config.train.steps = steps;
            }
            if let Some(seed) = seed {
                config.train.seed = seed;
                config.corpus.seed = seed;
            }
            if let Some(lambda) = lambda_ae {
                config.train.lambda_ae = lambda;
            }
            if tie {
                config.train.tie = Some(TieConfig::default());
            }
            if let Some(dir) = out_dir {
                config.out_dir = dir;
            }
            if let Some(path) = dump_config {
                config.validate()?;
                config.save(&path)?;
                println!("wrote {}", path.display());
                return Ok(());
            }
            let outcome = runner::run_train(&config, false)?;
            println!(
                "trained {} to step {} (run dir {})",
                config.arch.name(),
                outcome.final_step,
                outcome.run.display()
            );
        }
        Command::EvalPpl {
            run,
            eval_docs,
            window,
        } => {
            let config = ExperimentConfig::load(&runner::config_path(&run))?;
            let window = window.unwrap_or(config.corpus.doc_len);
            let ppl = runner::suite_ppl(&run, eval_docs, window)?;
            println!("ppl {ppl:.4} (window {window}, {eval_docs} docs)");
        }
        Command::ProfileBoundary { run, eval_docs } => {
            let outcome = runner::suite_boundary(&run, eval_docs)?;
            println!(
                "first-decile nll {:.4}, last-decile nll {:.4}, one-sided p {:.4} ({} wins / {} losses)",
                outcome.profile_first_decile,
                outcome.profile_last_decile,
                outcome.test.p_value,
                outcome.test.wins,
                outcome.test.losses,
            );
        }
        Command::EvalRecall { run, cases, seed } => {
            let outcome = runner::suite_uuid_recall(&run, cases, seed)?;
            for (k, acc) in &outcome.acc_at {
                println!("acc@{k} {acc:.4}");
            }
        }
        Command::EvalSurprise { run, cases, seed } => {
            let outcome = runner::suite_surprise(&run, cases, seed)?;
            println!(
                "relevant {:.4}, irrelevant {:.4}",
                outcome.relevant_acc, outcome.irrelevant_acc
            );
        }
        Command::ProbeReconstruct {
            run,
            strength,
            ratios,
            steps,
            train_docs,
            eval_docs,
            lr,
            seed,
        } => {
            let strength = match strength.as_str() {
                "weak" => DecoderStrength::Weak,
                "strong" => DecoderStrength::Strong,
                other => anyhow::bail!("unknown strength {other:?}; expected weak or strong"),
            };
            let report = runner::suite_probe(
                &run, strength, &ratios, train_docs, eval_docs, steps, lr, seed,
            )?;
            for (r, acc) in &report.per_ratio {
                println!("ratio {r}: reconstruction accuracy {acc:.4}");
            }
        }
        Command::EvalAll {
            run,
            eval_docs,
            cases,
            seed,
        } => {
            let config = ExperimentConfig::load(&runner::config_path(&run))?;
            let window = config.corpus.doc_len;
            let ppl = runner::suite_ppl(&run, eval_docs, window)?;
            println!("ppl {ppl:.4}");
            let boundary = runner::suite_boundary(&run, eval_docs)?;
            println!(
                "boundary first {:.4} last {:.4} p {:.4}",
                boundary.profile_first_decile,
                boundary.profile_last_decile,
                boundary.test.p_value
            );
            let recall = runner::suite_uuid_recall(&run, cases, seed)?;
            for (k, acc) in &recall.acc_at {
                println!("uuid acc@{k} {acc:.4}");
            }
            // Hard invariant: prefix accuracies must be nested.
            for pair in recall.acc_at.windows(2) {
                anyhow::ensure!(
                    pair[0].1 >= pair[1].1,
                    "prefix nesting violated: acc@{} < acc@{}",
                    pair[0].0,
                    pair[1].0
                );
            }
            let surprise = runner::suite_surprise(&run, cases, seed)?;
            println!(
                "surprise relevant {:.4} irrelevant {:.4} (paired p {:.4})",
                surprise.relevant_acc,
                surprise.irrelevant_acc,
                paired_sign_test(&surprise.relevant_hits, &surprise.irrelevant_hits).p_value
            );
            let probe = runner::suite_probe(
                &run,
                DecoderStrength::Weak,
                &[4, 8, 16, 32],
                24,
                8,
                400,
                1e-3,
                seed,
            )?;
            for (r, acc) in &probe.per_ratio {
                println!("probe (weak) ratio {r}: {acc:.4}");
            }
        }
        Command::CostModel {
            tokens,
            segment_len,
            ratio,
        } => {
            let span = cost_model(tokens, segment_len, ratio)?;
            println!(
                "{tokens} tokens, segment {segment_len}, ratio {} -> effective span {span}",
                ratio.map_or_else(|| "-".to_string(), |r| r.to_string())
            );
        }
    }
    Ok(())
}
