//! Synthetic corpora and recall tasks over the character-level toy
//! vocabulary.
//!
//! Documents are streams of short sentences about a recurring topic subject,
//! mixed with patterns that demand copying from earlier context: key-value
//! bindings, a long hex "secret code", needle facts with question/answer
//! pairs, and verbatim sentence repeats. Every generator is a pure function
//! of its seed, and each dataset file starts with a JSON header recording how
//! it was produced.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use minigist_core::probe::RecallCase;
use minigist_core::rng::Rng;
use minigist_core::vocab::Vocab;

pub const SUBJECTS: &[&str] = &[
    "alba", "bruno", "clem", "dara", "edwin", "freya", "goran", "hana", "ivor", "juna", "karel",
    "lotte",
];

/// Reserved for surprise-needle evaluation; never appears in any corpus.
pub const NOVEL_SUBJECT: &str = "mr tree";

pub const OBJECTS: &[&str] = &[
    "apple", "bread", "melon", "pearl", "stone", "river", "cloud", "sugar", "honey", "berry",
    "olive", "lemon", "plum", "fig", "corn", "mint",
];

pub const VERBS: &[&str] = &["likes", "keeps", "finds", "sees", "holds"];

pub const KEYS: &[&str] = &[
    "amber", "basil", "cedar", "delta", "ember", "flint", "gleam", "haze",
];

const HEX: &[u8] = b"0123456789abcdef";

fn hex_string(rng: &mut Rng, len: usize) -> String {
    (0..len)
        .map(|_| HEX[rng.below(16)] as char)
        .collect()
}

fn digit_string(rng: &mut Rng, len: usize) -> String {
    (0..len)
        .map(|_| (b'0' + rng.below(10) as u8) as char)
        .collect()
}

/// One sentence of topical filler.
fn topic_sentence(rng: &mut Rng, subject: &str) -> String {
    format!(
        "{subject} {} the {}. ",
        rng.choose(VERBS),
        rng.choose(OBJECTS)
    )
}

/// Relative frequencies of the document's pattern events.
struct MixWeights {
    topic: u32,
    other: u32,
    kv: u32,
    needle: u32,
    secret: u32,
    echo: u32,
    repeat: u32,
}

const MIX: MixWeights = MixWeights {
    topic: 12,
    other: 4,
    kv: 24,
    needle: 16,
    secret: 12,
    echo: 14,
    repeat: 18,
};

/// Generate one language-modeling document of exactly `len` tokens.
///
/// Key-value bindings, needle facts, and long codes are answered by queries
/// scheduled 1-10 sentences later, so recall distances range from a few
/// tokens to several segments and compression quality is visible in the LM
/// loss. Verbatim sentence repeats add a plain induction signal.
pub fn lm_document(rng: &mut Rng, len: usize) -> String {
    let vocab = Vocab::toy();
    let topic = *rng.choose(SUBJECTS);
    let mut text = String::new();
    // Queries scheduled for a future sentence index.
    let mut pending: Vec<(usize, String)> = Vec::new();
    let total = MIX.topic + MIX.other + MIX.kv + MIX.needle + MIX.secret + MIX.echo + MIX.repeat;
    let mut sentences: Vec<String> = Vec::new();
    let mut sentence_idx = 0usize;
    // Every binding is unique within a document, so each query has exactly
    // one consistent answer in context.
    let mut free_keys: Vec<&str> = KEYS.to_vec();
    rng.shuffle(&mut free_keys);
    let mut used_needles: Vec<(&str, &str)> = Vec::new();
    let mut secret_used = false;
    while text.chars().count() < len {
        if let Some(pos) = pending.iter().position(|(due, _)| *due <= sentence_idx) {
            let (_, q) = pending.swap_remove(pos);
            text.push_str(&q);
            sentences.push(q);
            sentence_idx += 1;
            continue;
        }
        let roll = rng.below(total as usize) as u32;
        let topic_end = MIX.topic;
        let other_end = topic_end + MIX.other;
        let kv_end = other_end + MIX.kv;
        let needle_end = kv_end + MIX.needle;
        let secret_end = needle_end + MIX.secret;
        let echo_end = secret_end + MIX.echo;
        let schedule = |rng: &mut Rng, pending: &mut Vec<(usize, String)>, q: String| {
            let delay = 1 + rng.below(10);
            pending.push((sentence_idx + delay, q));
        };
        let sentence = if roll < topic_end {
            topic_sentence(rng, topic)
        } else if roll < other_end {
            let other = *rng.choose(SUBJECTS);
            topic_sentence(rng, other)
        } else if roll < kv_end && !free_keys.is_empty() {
            let key = free_keys.pop().expect("checked nonempty");
            let value = hex_string(rng, 8);
            schedule(rng, &mut pending, format!("recall: code {key} is {value}. "));
            format!("code {key} is {value}. ")
        } else if roll < needle_end {
            // Needle subjects are usually the topic; sometimes another
            // recurring subject. The reserved novel subject never appears.
            let subj = if rng.next_f32() < 0.85 {
                topic
            } else {
                *rng.choose(SUBJECTS)
            };
            let (kind, content) = if rng.next_f32() < 0.5 {
                ("food", (*rng.choose(OBJECTS)).to_string())
            } else {
                ("number", digit_string(rng, 8))
            };
            if used_needles.contains(&(subj, kind)) {
                topic_sentence(rng, topic)
            } else {
                used_needles.push((subj, kind));
                schedule(
                    rng,
                    &mut pending,
                    format!(
                        "question: what is {subj}'s special {kind}? answer: {subj}'s special {kind} is {content}. "
                    ),
                );
                format!("{subj}'s special {kind} is {content}. ")
            }
        } else if roll < secret_end && !secret_used {
            secret_used = true;
            let code = hex_string(rng, 32);
            schedule(
                rng,
                &mut pending,
                format!("question: what is the secret code? answer: the secret code is {code}. "),
            );
            format!("the secret code is {code}. ")
        } else if roll < echo_end {
            // Adjacent verbatim duplication of high-entropy content: the
            // steepest available copying signal.
            let len = 12 + rng.below(12);
            let value = hex_string(rng, len);
            format!("echo {value}. echo {value}. ")
        } else if !sentences.is_empty() {
            let valued: Vec<usize> = sentences
                .iter()
                .enumerate()
                .filter(|(_, s)| s.chars().any(|c| c.is_ascii_digit()))
                .map(|(i, _)| i)
                .collect();
            if !valued.is_empty() && rng.next_f32() < 0.7 {
                sentences[*rng.choose(&valued)].clone()
            } else {
                rng.choose(&sentences).clone()
            }
        } else {
            topic_sentence(rng, topic)
        };
        text.push_str(&sentence);
        sentences.push(sentence);
        sentence_idx += 1;
    }
    let tokens: Vec<char> = text.chars().take(len).collect();
    debug_assert!(tokens.iter().all(|&c| vocab.contains(c)));
    tokens.into_iter().collect()
}

/// Encode a document text into token ids.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    Vocab::toy()
        .encode(text)
        .map_err(|e| anyhow::anyhow!("{e}"))
}

/// Document `index` of the infinite corpus stream for `seed`.
///
/// Training consumes the stream sequentially (one fresh document per batch
/// slot), so no document is ever revisited and held-out evaluation measures
/// the distribution rather than memorization.
pub fn stream_doc(seed: u64, index: u64, doc_len: usize) -> Vec<u32> {
    let mut rng = Rng::derive(seed, 0x636f_7270 ^ index); // "corp"
    encode(&lm_document(&mut rng, doc_len)).expect("generator stays in vocabulary")
}

/// Deterministic corpus of `docs` documents, each `doc_len` tokens.
pub fn lm_corpus(seed: u64, docs: usize, doc_len: usize) -> Vec<Vec<u32>> {
    (0..docs).map(|i| stream_doc(seed, i as u64, doc_len)).collect()
}

/// Filler text of exactly `len` tokens about `topic`, with an occasional
/// sentence about another subject.
fn filler(rng: &mut Rng, topic: &str, len: usize) -> String {
    let mut text = String::new();
    while text.chars().count() < len {
        let subject = if rng.next_f32() < 0.7 {
            topic
        } else {
            *rng.choose(SUBJECTS)
        };
        text.push_str(&topic_sentence(rng, subject));
    }
    text.chars().take(len).collect()
}

/// A long-needle recall case: a 32-hex-digit code planted early enough that
/// it is fully compressed before the query runs.
pub fn uuid_case(rng: &mut Rng, context_len: usize, segment_len: usize, digits: usize) -> RecallCase {
    let topic = *rng.choose(SUBJECTS);
    let code = hex_string(rng, digits);
    let needle_text = format!("the secret code is {code}. ");
    let needle_tokens = needle_text.chars().count();
    // The needle must sit at least one full segment before the context end so
    // its segment completes (and is compressed) before the query.
    let latest = context_len
        .saturating_sub(needle_tokens + segment_len)
        .max(1);
    let start = 1 + rng.below(latest);
    let mut text = filler(rng, topic, start);
    text.push_str(&needle_text);
    let needle_start = start;
    let needle_end = start + needle_tokens;
    let tail = filler(rng, topic, context_len - text.chars().count());
    text.push_str(&tail);
    let context = encode(&text).expect("in vocabulary");
    let query = encode("question: what is the secret code? answer: the secret code is ")
        .expect("in vocabulary");
    let answer = encode(&code).expect("in vocabulary");
    RecallCase {
        context,
        query,
        answer,
        needle: needle_start..needle_end,
    }
}

pub fn uuid_cases(
    seed: u64,
    count: usize,
    context_len: usize,
    segment_len: usize,
    digits: usize,
) -> Vec<RecallCase> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::derive(seed, 0x7575_6964 ^ (i as u64)); // "uuid"
            uuid_case(&mut rng, context_len, segment_len, digits)
        })
        .collect()
}

/// One surprise-needle case in all four Table-9 variants: the same context
/// skeleton with the needle's subject set to the recurring topic subject
/// (relevant) or the reserved novel subject (irrelevant), crossed with word
/// and number needle contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurpriseCase {
    pub relevant_word: SurpriseVariant,
    pub irrelevant_word: SurpriseVariant,
    pub relevant_number: SurpriseVariant,
    pub irrelevant_number: SurpriseVariant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurpriseVariant {
    pub context: String,
    pub query: String,
    pub answer: String,
    pub needle_start: usize,
    pub needle_end: usize,
}

impl SurpriseVariant {
    pub fn to_case(&self) -> Result<RecallCase> {
        Ok(RecallCase {
            context: encode(&self.context)?,
            query: encode(&self.query)?,
            answer: encode(&self.answer)?,
            needle: self.needle_start..self.needle_end,
        })
    }
}

pub fn surprise_case(rng: &mut Rng, context_len: usize, segment_len: usize) -> SurpriseCase {
    let topic = *rng.choose(SUBJECTS);
    let word = (*rng.choose(OBJECTS)).to_string();
    let number = digit_string(rng, 8);
    // One shared skeleton: prefix + needle + tail. The needle is compressed
    // before the query; the irrelevant subject appears exactly once.
    let longest_needle = format!("{NOVEL_SUBJECT}'s special number is {number}. ")
        .chars()
        .count();
    let latest = context_len
        .saturating_sub(longest_needle + segment_len)
        .max(1);
    let start = 1 + rng.below(latest);
    let prefix = filler(rng, topic, start);
    let tail_seed = rng.next_u64();

    let build = |subj: &str, kind: &str, content: &str| {
        let needle = format!("{subj}'s special {kind} is {content}. ");
        let needle_tokens = needle.chars().count();
        let mut text = prefix.clone();
        text.push_str(&needle);
        let mut tail_rng = Rng::new(tail_seed);
        let tail = filler(
            &mut tail_rng,
            topic,
            context_len.saturating_sub(text.chars().count()),
        );
        text.push_str(&tail);
        SurpriseVariant {
            context: text,
            query: format!(
                "question: what is {subj}'s special {kind}? answer: {subj}'s special {kind} is "
            ),
            answer: content.to_string(),
            needle_start: start,
            needle_end: start + needle_tokens,
        }
    };

    SurpriseCase {
        relevant_word: build(topic, "food", &word),
        irrelevant_word: build(NOVEL_SUBJECT, "food", &word),
        relevant_number: build(topic, "number", &number),
        irrelevant_number: build(NOVEL_SUBJECT, "number", &number),
    }
}

pub fn surprise_cases(seed: u64, count: usize, context_len: usize, segment_len: usize) -> Vec<SurpriseCase> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::derive(seed, 0x7375_7270 ^ (i as u64)); // "surp"
            surprise_case(&mut rng, context_len, segment_len)
        })
        .collect()
}

/// Key-value recall with the needle planted in the last half-segment of the
/// context, so truncating to `k` tokens moves it in and out of compression.
pub fn kv_case(rng: &mut Rng, context_len: usize, segment_len: usize) -> RecallCase {
    let topic = *rng.choose(SUBJECTS);
    let key = *rng.choose(KEYS);
    let value = hex_string(rng, 8);
    let needle_text = format!("code {key} is {value}. ");
    let needle_tokens = needle_text.chars().count();
    // Needle inside the last half segment of the context.
    let window = (segment_len / 2).saturating_sub(needle_tokens).max(1);
    let start = context_len - needle_tokens - rng.below(window);
    let mut text = filler(rng, topic, start);
    text.push_str(&needle_text);
    let tail_len = context_len - text.chars().count();
    text.push_str(&filler(rng, topic, tail_len));
    let context = encode(&text).expect("in vocabulary");
    RecallCase {
        context,
        query: encode(&format!("recall: code {key} is ")).expect("in vocabulary"),
        answer: encode(&value).expect("in vocabulary"),
        needle: start..start + needle_tokens,
    }
}

pub fn kv_cases(seed: u64, count: usize, context_len: usize, segment_len: usize) -> Vec<RecallCase> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::derive(seed, 0x6b76_7263 ^ (i as u64)); // "kvrc"
            kv_case(&mut rng, context_len, segment_len)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// JSON header describing how a dataset file was generated.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub kind: String,
    pub seed: u64,
    pub size: usize,
    pub context_len: usize,
    pub segment_len: usize,
    pub generator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DocRecord {
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseRecord {
    context: String,
    query: String,
    answer: String,
    needle_start: usize,
    needle_end: usize,
}

/// Generate a dataset file (JSONL: header record, then one record per item).
pub fn gen_data(kind: &str, seed: u64, size: usize, context_len: usize, segment_len: usize, out: &Path) -> Result<()> {
    let vocab = Vocab::toy();
    let _ = vocab;
    let header = DatasetHeader {
        kind: kind.to_string(),
        seed,
        size,
        context_len,
        segment_len,
        generator: format!("minigist gen-data v1 kind={kind}"),
    };
    let file = fs::File::create(out)
        .with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    match kind {
        "lm-corpus" => {
            for i in 0..size {
                let mut rng = Rng::derive(seed, 0x636f_7270 ^ (i as u64));
                let text = lm_document(&mut rng, context_len);
                writeln!(w, "{}", serde_json::to_string(&DocRecord { text })?)?;
            }
        }
        "uuid-recall" => {
            let vocab = Vocab::toy();
            for case in uuid_cases(seed, size, context_len, segment_len, 32) {
                writeln!(
                    w,
                    "{}",
                    serde_json::to_string(&CaseRecord {
                        context: vocab.decode(&case.context),
                        query: vocab.decode(&case.query),
                        answer: vocab.decode(&case.answer),
                        needle_start: case.needle.start,
                        needle_end: case.needle.end,
                    })?
                )?;
            }
        }
        "surprise-needle" => {
            for case in surprise_cases(seed, size, context_len, segment_len) {
                writeln!(w, "{}", serde_json::to_string(&case)?)?;
            }
        }
        "kv-recall" => {
            let vocab = Vocab::toy();
            for case in kv_cases(seed, size, context_len, segment_len) {
                writeln!(
                    w,
                    "{}",
                    serde_json::to_string(&CaseRecord {
                        context: vocab.decode(&case.context),
                        query: vocab.decode(&case.query),
                        answer: vocab.decode(&case.answer),
                        needle_start: case.needle.start,
                        needle_end: case.needle.end,
                    })?
                )?;
            }
        }
        other => bail!(
            "unknown dataset kind {other:?}; valid kinds: lm-corpus, uuid-recall, surprise-needle, kv-recall"
        ),
    }
    w.flush()?;
    Ok(())
}

/// Load an lm-corpus dataset file back into token documents.
pub fn load_lm_corpus(path: &Path) -> Result<(DatasetHeader, Vec<Vec<u32>>)> {
    let content = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = content.lines();
    let header: DatasetHeader = serde_json::from_str(
        lines.next().context("empty dataset file")?,
    )?;
    if header.kind != "lm-corpus" {
        bail!("expected an lm-corpus file, found kind {:?}", header.kind);
    }
    let mut docs = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(line)?;
        docs.push(encode(&rec.text)?);
    }
    Ok((header, docs))
}
