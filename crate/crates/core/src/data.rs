//! Corpus readers, MRC triple construction and ground-truth label tensors.
//!
//! Two input formats are supported:
//!
//! * CoNLL: one token per line, whitespace-separated columns, the last column
//!   a BIO tag, blank lines between sentences.
//! * Span JSONL: one `{"id", "tokens", "spans": [{"start", "end", "label"}]}`
//!   object per line with inclusive ends. Predictions are written in the
//!   same schema, with an extra `"score"` per span.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::query::{ensure_valid, lookup_query, QueryCatalog};
use crate::span::{sort_spans, EntitySpan, EntityType, TagSet};

/// A tokenized sentence with its (possibly overlapping) gold spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_record(&self) -> SpanRecord {
        SpanRecord {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            spans: self
                .spans
                .iter()
                .map(|s| RecordSpan {
                    start: s.start,
                    end: s.end,
                    label: s.entity_type.name.clone(),
                    score: s.score,
                })
                .collect(),
        }
    }
}

/// One line of a span JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanRecord {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub spans: Vec<RecordSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSpan {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Splits query text into tokens. Context tokens come pre-tokenized from the
/// corpus; only query text goes through a tokenizer.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Whitespace split, with sentence punctuation detached into its own tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

const DETACHED: &[char] = &[',', '.', ';', ':', '!', '?', '"'];

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let core = word.trim_end_matches(DETACHED);
            let lead = core.len() - core.trim_start_matches(DETACHED).len();
            for c in core[..lead].chars() {
                out.push(c.to_string());
            }
            if lead < core.len() {
                out.push(core[lead..].to_string());
            }
            for c in word[core.len()..].chars() {
                out.push(c.to_string());
            }
        }
        out
    }
}

/// One token per non-whitespace character, for character-level corpora.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect()
    }
}

/// Reads a CoNLL/BIO file into span records. Ends are inclusive; an `I-X`
/// that does not continue an open `X` run starts a new span.
pub fn read_conll_records(path: impl AsRef<Path>) -> Result<Vec<SpanRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conll(BufReader::new(file), path)
}

pub(crate) fn parse_conll(reader: impl BufRead, path: &Path) -> Result<Vec<SpanRecord>> {
    let mut records = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<RecordSpan> = Vec::new();
    // (label, start) of the run being extended
    let mut open: Option<(String, usize)> = None;

    let flush = |tokens: &mut Vec<String>,
                     spans: &mut Vec<RecordSpan>,
                     open: &mut Option<(String, usize)>,
                     records: &mut Vec<SpanRecord>| {
        if let Some((label, start)) = open.take() {
            spans.push(RecordSpan {
                start,
                end: tokens.len() - 1,
                label,
                score: None,
            });
        }
        if !tokens.is_empty() {
            records.push(SpanRecord {
                id: records.len().to_string(),
                tokens: std::mem::take(tokens),
                spans: std::mem::take(spans),
            });
        }
    };

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut tokens, &mut spans, &mut open, &mut records);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let columns: Vec<&str> = line.split_whitespace().collect();
        if columns.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected a token and a tag column, got {line:?}"),
            });
        }
        let tag = columns[columns.len() - 1];
        let position = tokens.len();
        let (prefix, label) = match tag.split_once('-') {
            _ if tag == "O" => ("O", ""),
            Some((p @ ("B" | "I"), label)) if !label.is_empty() => (p, label),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("unknown tag {tag:?}; expected O, B-<type> or I-<type>"),
                })
            }
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|(l, _)| l == label);
        if !continues {
            if let Some((l, start)) = open.take() {
                spans.push(RecordSpan {
                    start,
                    end: position - 1,
                    label: l,
                    score: None,
                });
            }
            if prefix != "O" {
                open = Some((label.to_string(), position));
            }
        }
        tokens.push(columns[0].to_string());
    }
    flush(&mut tokens, &mut spans, &mut open, &mut records);
    Ok(records)
}

/// Reads span JSONL records, checking ranges per line.
pub fn read_span_jsonl_records(path: impl AsRef<Path>) -> Result<Vec<SpanRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_span_jsonl(BufReader::new(file), path)
}

pub(crate) fn parse_span_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<SpanRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let record: SpanRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let n = record.tokens.len();
        for s in &record.spans {
            if s.start > s.end {
                return Err(parse_err(format!("span start {} > end {}", s.start, s.end)));
            }
            if s.end >= n {
                return Err(parse_err(format!(
                    "span ({}, {}) out of range for {n} tokens",
                    s.start, s.end
                )));
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Sorted, de-duplicated labels used across `records`.
pub fn infer_tag_set(records: &[SpanRecord]) -> Result<TagSet> {
    let labels: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.spans.iter().map(|s| s.label.as_str()))
        .collect();
    TagSet::new(labels)
}

/// Resolves labels against `tags`, validates ranges and drops duplicate
/// identical typed spans.
pub fn records_to_sentences(records: Vec<SpanRecord>, tags: &TagSet) -> Result<Vec<Sentence>> {
    records
        .into_iter()
        .map(|record| {
            let mut spans = Vec::with_capacity(record.spans.len());
            let mut seen = HashSet::new();
            for s in record.spans {
                let entity_type = tags.get(&s.label).cloned().ok_or_else(|| {
                    Error::InvalidSpan(format!(
                        "sentence {}: unknown entity type {:?}",
                        record.id, s.label
                    ))
                })?;
                let mut span = EntitySpan::new(s.start, s.end, entity_type)?;
                if let Some(score) = s.score {
                    span = span.with_score(score)?;
                }
                span.validate(record.tokens.len())?;
                if !seen.insert(span.key()) {
                    warn!(sentence = %record.id, span = %span, "dropping duplicate span");
                    continue;
                }
                spans.push(span);
            }
            sort_spans(&mut spans);
            Ok(Sentence {
                id: record.id,
                tokens: record.tokens,
                spans,
            })
        })
        .collect()
}

pub fn read_conll(path: impl AsRef<Path>, tags: &TagSet) -> Result<Vec<Sentence>> {
    records_to_sentences(read_conll_records(path)?, tags)
}

pub fn read_span_jsonl(path: impl AsRef<Path>, tags: &TagSet) -> Result<Vec<Sentence>> {
    records_to_sentences(read_span_jsonl_records(path)?, tags)
}

/// Reads either format, picking span JSONL for `.jsonl`/`.json` extensions.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SpanRecord>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => read_span_jsonl_records(path),
        _ => read_conll_records(path),
    }
}

pub fn write_span_jsonl(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let records: Vec<SpanRecord> = sentences.iter().map(Sentence::to_record).collect();
    write_jsonl(path, &records)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One (query, context, answers) training unit for a (sentence, type) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcExample {
    pub sentence_id: String,
    pub entity_type: EntityType,
    pub query_text: String,
    pub query_tokens: Vec<String>,
    pub context_tokens: Vec<String>,
    /// Inclusive `(start, end)` pairs in context coordinates, sorted.
    pub answers: Vec<(usize, usize)>,
}

impl MrcExample {
    pub fn context_len(&self) -> usize {
        self.context_tokens.len()
    }
}

/// Inspection dump line for an [`MrcExample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub sentence_id: String,
    pub label: String,
    pub query: String,
    pub context: Vec<String>,
    pub answers: Vec<[usize; 2]>,
}

impl From<&MrcExample> for TripleRecord {
    fn from(e: &MrcExample) -> Self {
        TripleRecord {
            sentence_id: e.sentence_id.clone(),
            label: e.entity_type.name.clone(),
            query: e.query_text.clone(),
            context: e.context_tokens.clone(),
            answers: e.answers.iter().map(|&(s, t)| [s, t]).collect(),
        }
    }
}

pub fn write_triples(path: impl AsRef<Path>, examples: &[MrcExample]) -> Result<()> {
    let records: Vec<TripleRecord> = examples.iter().map(TripleRecord::from).collect();
    write_jsonl(path, &records)
}

/// Builds one example per (sentence, type), ordered by sentence then tag
/// index. Types with no mention in a sentence yield zero-answer examples.
pub fn build_triples(
    sentences: &[Sentence],
    tags: &TagSet,
    catalog: &QueryCatalog,
    tokenizer: &dyn Tokenizer,
    exec: Execution,
) -> Result<Vec<MrcExample>> {
    ensure_valid(catalog, tags)?;
    let queries = tags
        .types()
        .iter()
        .map(|t| {
            let q = lookup_query(catalog, t)?;
            let tokens = tokenizer.tokenize(&q.text);
            Ok((q, tokens))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_sentence = par::map(exec, sentences, |sentence| {
        queries
            .iter()
            .map(|(query, query_tokens)| {
                let mut answers: Vec<(usize, usize)> = sentence
                    .spans
                    .iter()
                    .filter(|s| s.entity_type.name == query.entity_type.name)
                    .map(|s| (s.start, s.end))
                    .collect();
                answers.sort_unstable();
                MrcExample {
                    sentence_id: sentence.id.clone(),
                    entity_type: query.entity_type.clone(),
                    query_text: query.text.clone(),
                    query_tokens: query_tokens.clone(),
                    context_tokens: sentence.tokens.clone(),
                    answers,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(per_sentence.into_iter().flatten().collect())
}

/// Per-token boundary labels and the positive start-end pairs of one example.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelTensors {
    pub y_start: Vec<u8>,
    pub y_end: Vec<u8>,
    pub y_match: BTreeSet<(usize, usize)>,
}

impl LabelTensors {
    pub fn len(&self) -> usize {
        self.y_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_start.is_empty()
    }

    pub fn starts(&self) -> BTreeSet<usize> {
        indexes_of(&self.y_start)
    }

    pub fn ends(&self) -> BTreeSet<usize> {
        indexes_of(&self.y_end)
    }
}

fn indexes_of(labels: &[u8]) -> BTreeSet<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == 1)
        .map(|(i, _)| i)
        .collect()
}

pub fn make_label_tensors(example: &MrcExample) -> LabelTensors {
    label_tensors_for(example.context_len(), &example.answers)
}

pub fn label_tensors_for(n: usize, answers: &[(usize, usize)]) -> LabelTensors {
    let mut tensors = LabelTensors {
        y_start: vec![0; n],
        y_end: vec![0; n],
        y_match: BTreeSet::new(),
    };
    for &(s, e) in answers {
        tensors.y_start[s] = 1;
        tensors.y_end[e] = 1;
        tensors.y_match.insert((s, e));
    }
    tensors
}

/// The positive pairs of `y_match`, in sorted order.
pub fn decode_gold(tensors: &LabelTensors) -> Vec<(usize, usize)> {
    tensors.y_match.iter().copied().collect()
}
