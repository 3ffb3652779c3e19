//! Training loop, prediction, evaluation and probability export.
//!
//! Training is plain minibatch SGD on the joint loss. Per-example gradients
//! are computed in parallel and summed in example order, so a run is fully
//! determined by its seed, config and data regardless of thread count.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::data::{
    build_triples, infer_tag_set, make_label_tensors, read_records, records_to_sentences,
    CharTokenizer, MrcExample, Sentence, SpanRecord, Tokenizer, WordTokenizer,
};
use crate::decode::{decode_sentence, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_spans, subsample_training, EvalReport};
use crate::model::checkpoint::{write_atomic, Checkpoint};
use crate::model::{
    compute_loss, Candidates, EncoderInput, Gradients, LossBreakdown, LossWeights, MrcModel,
    ToyEncoderConfig, Vocab,
};
use crate::par::{self, Execution};
use crate::query::{ensure_valid, lookup_query, QueryCatalog, QueryStrategy};
use crate::span::TagSet;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Training configuration. Mirrors the JSON config file field for field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub match_threshold: f64,
    pub flat_mode: bool,
    pub encoder: ToyEncoderConfig,
    /// Extra tokens (one per line) added to the toy encoder vocabulary.
    pub vocabulary_path: Option<PathBuf>,
    /// Tokenize query text per character instead of per word.
    pub char_level: bool,
    /// Tag set order; inferred from the training labels when empty.
    pub tags: Vec<String>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub catalog_path: Option<PathBuf>,
    pub query_strategy: Option<QueryStrategy>,
    pub output_dir: PathBuf,
    pub subsample_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            match_threshold: 0.5,
            flat_mode: false,
            encoder: ToyEncoderConfig::default(),
            vocabulary_path: None,
            char_level: false,
            tags: Vec::new(),
            train_path: None,
            test_path: None,
            catalog_path: None,
            query_strategy: None,
            output_dir: PathBuf::from("runs/default"),
            subsample_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config("subsample_fraction must be in (0, 1]".into()));
        }
        self.loss_weights()?;
        self.decode_config().validate()?;
        self.encoder.validate()
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta, self.gamma)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            match_threshold: self.match_threshold,
            flat_mode: self.flat_mode,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn tokenizer(char_level: bool) -> Box<dyn Tokenizer> {
    if char_level {
        Box::new(CharTokenizer)
    } else {
        Box::new(WordTokenizer)
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub examples: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// Written once at the end of a file-level training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub epochs: Vec<EpochLog>,
    pub final_result: Option<EvalReport>,
    pub wall_clock_seconds: f64,
}

pub fn version_string() -> String {
    match option_env!("MRC_NER_GIT_DESCRIBE") {
        Some(v) => v.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn build_vocab(sentences: &[Sentence], examples: &[MrcExample], extra: &[String]) -> Vocab {
    let mut seen = BTreeSet::new();
    let mut query_tokens = Vec::new();
    for e in examples {
        for t in &e.query_tokens {
            if seen.insert(t.as_str()) {
                query_tokens.push(t.as_str());
            }
        }
    }
    Vocab::new(
        sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
            .chain(query_tokens)
            .chain(extra.iter().map(String::as_str)),
    )
}

/// Trains a fresh model on in-memory sentences.
pub fn train_model(
    config: &TrainConfig,
    sentences: &[Sentence],
    tags: &TagSet,
    catalog: &QueryCatalog,
    extra_vocab: &[String],
    exec: Execution,
) -> Result<TrainOutcome> {
    config.validate()?;
    ensure_valid(catalog, tags)?;
    let weights = config.loss_weights()?;

    let non_empty: Vec<Sentence> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    if non_empty.len() != sentences.len() {
        warn!(skipped = sentences.len() - non_empty.len(), "skipping empty sentences");
    }
    let sentences = if config.subsample_fraction < 1.0 {
        subsample_training(&non_empty, config.subsample_fraction, config.seed)?
    } else {
        non_empty
    };
    if sentences.is_empty() {
        return Err(Error::Config("no training sentences".into()));
    }

    let tok = tokenizer(config.char_level);
    let examples = build_triples(&sentences, tags, catalog, tok.as_ref(), exec)?;
    let golds: Vec<_> = examples.iter().map(make_label_tensors).collect();
    let vocab = build_vocab(&sentences, &examples, extra_vocab);
    let mut model = MrcModel::new(config.encoder.clone(), vocab, config.seed)?;
    info!(
        sentences = sentences.len(),
        examples = examples.len(),
        parameters = model.parameter_count(),
        "training"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results = par::map(exec, batch, |&i| {
                model.loss_and_gradients(&examples[i], &golds[i], &weights)
            });
            let mut total = Gradients::zeros(&model);
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                sum.start += loss.start;
                sum.end += loss.end;
                sum.span += loss.span;
                sum.total += loss.total;
                total.add_assign(&grads);
            }
            model.sgd_step(&total, config.learning_rate / batch.len() as f64);
        }
        let n = examples.len() as f64;
        let log = EpochLog {
            epoch,
            examples: examples.len(),
            loss: LossBreakdown {
                start: sum.start / n,
                end: sum.end / n,
                span: sum.span / n,
                total: sum.total / n,
            },
        };
        info!(
            epoch,
            start = log.loss.start,
            end = log.loss.end,
            span = log.loss.span,
            total = log.loss.total,
            "epoch done"
        );
        epochs.push(log);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            tags: tags.clone(),
            catalog: catalog.clone(),
            char_level: config.char_level,
            config_hash: config.hash(),
        },
        epochs,
    })
}

/// Per-type probabilities for one sentence.
fn sentence_outputs(
    model: &MrcModel,
    queries: &[(crate::span::EntityType, Vec<String>)],
    tokens: &[String],
) -> Result<Vec<(crate::span::EntityType, crate::model::ProbOutputs)>> {
    queries
        .iter()
        .map(|(t, q)| {
            let state = model.forward(&EncoderInput::new(q, tokens), Candidates::Inference)?;
            Ok((t.clone(), state.probs))
        })
        .collect()
}

fn tokenized_queries(
    checkpoint: &Checkpoint,
    tags: &TagSet,
    catalog: &QueryCatalog,
) -> Result<Vec<(crate::span::EntityType, Vec<String>)>> {
    ensure_valid(catalog, tags)?;
    let tok = tokenizer(checkpoint.char_level);
    tags.types()
        .iter()
        .map(|t| Ok((t.clone(), tok.tokenize(&lookup_query(catalog, t)?.text))))
        .collect()
}

/// Decodes every sentence with one query per type in `tags`.
pub fn predict_sentences(
    checkpoint: &Checkpoint,
    tags: &TagSet,
    catalog: &QueryCatalog,
    sentences: &[Sentence],
    decode: &DecodeConfig,
    exec: Execution,
) -> Result<Vec<Sentence>> {
    decode.validate()?;
    let queries = tokenized_queries(checkpoint, tags, catalog)?;
    par::map(exec, sentences, |s| {
        let spans = if s.is_empty() {
            Vec::new()
        } else {
            let outputs = sentence_outputs(&checkpoint.model, &queries, &s.tokens)?;
            decode_sentence(&outputs, decode)?
        };
        Ok(Sentence {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            spans,
        })
    })
    .into_iter()
    .collect()
}

/// The catalog to query a checkpoint with: its own, or an override that
/// must cover the checkpoint's tag set.
pub fn active_catalog(checkpoint: &Checkpoint, override_catalog: Option<QueryCatalog>) -> Result<QueryCatalog> {
    match override_catalog {
        None => Ok(checkpoint.catalog.clone()),
        Some(c) => {
            let problems = crate::query::validate_catalog(&c, &checkpoint.tags);
            if problems.is_empty() {
                Ok(c)
            } else {
                Err(Error::TagSetMismatch(format!(
                    "catalog {:?} does not cover the checkpoint tag set: {}",
                    c.dataset_id,
                    problems.join("; ")
                )))
            }
        }
    }
}

/// Reads sentences to predict on. `.txt` files hold one whitespace-tokenized
/// sentence per line; other files go through [`read_records`]. Gold spans in
/// the input are ignored.
pub fn read_prediction_input(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let records: Vec<SpanRecord> = if path.extension().and_then(|e| e.to_str()) == Some("txt") {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        BufReader::new(file)
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let line = line.map_err(|e| Error::io(path, e))?;
                Ok(SpanRecord {
                    id: i.to_string(),
                    tokens: line.split_whitespace().map(String::from).collect(),
                    spans: Vec::new(),
                })
            })
            .collect::<Result<_>>()?
    } else {
        read_records(path)?
    };
    Ok(records
        .into_iter()
        .map(|r| Sentence {
            id: r.id,
            tokens: r.tokens,
            spans: Vec::new(),
        })
        .collect())
}

/// Reads a gold corpus against a known tag set.
pub fn read_gold(path: impl AsRef<Path>, tags: &TagSet) -> Result<Vec<Sentence>> {
    records_to_sentences(read_records(path)?, tags)
}

/// File-level training: reads data and catalog named in `config`, trains,
/// evaluates on `test_path` when given, and writes the checkpoint and run
/// manifest into `output_dir`.
pub fn train(config: &TrainConfig, exec: Execution) -> Result<(Checkpoint, RunManifest)> {
    let started = Instant::now();
    config.validate()?;
    let train_path = config
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("train_path is required".into()))?;
    let records = read_records(train_path)?;
    let tags = if config.tags.is_empty() {
        infer_tag_set(&records)?
    } else {
        TagSet::new(config.tags.iter().cloned())?
    };
    let catalog = load_catalog(config.catalog_path.as_deref(), config.query_strategy)?;
    ensure_valid(&catalog, &tags)?;
    let sentences = records_to_sentences(records, &tags)?;
    let extra_vocab = match &config.vocabulary_path {
        Some(p) => read_token_list(p)?,
        None => Vec::new(),
    };
    let test = match &config.test_path {
        Some(p) => Some(read_gold(p, &tags)?),
        None => None,
    };

    let outcome = train_model(config, &sentences, &tags, &catalog, &extra_vocab, exec)?;
    let final_result = match &test {
        Some(gold) => {
            let pred = predict_sentences(
                &outcome.checkpoint,
                &tags,
                &catalog,
                gold,
                &config.decode_config(),
                exec,
            )?;
            Some(evaluate_spans(gold, &pred, exec)?)
        }
        None => None,
    };
    outcome
        .checkpoint
        .save(config.output_dir.join(CHECKPOINT_FILE))?;
    let manifest = RunManifest {
        config_hash: config.hash(),
        version: version_string(),
        epochs: outcome.epochs,
        final_result,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&config.output_dir.join(MANIFEST_FILE), &json)?;
    Ok((outcome.checkpoint, manifest))
}

/// Loads a catalog file, or generates a position-index catalog when no file
/// is given and that strategy is requested.
pub fn load_catalog(path: Option<&Path>, strategy: Option<QueryStrategy>) -> Result<QueryCatalog> {
    let catalog = match (path, strategy) {
        (Some(p), _) => QueryCatalog::load(p)?,
        (None, Some(QueryStrategy::PositionIndex)) => QueryCatalog::position_index("generated"),
        (None, _) => {
            return Err(Error::Config(
                "catalog_path is required unless the query strategy is PositionIndex".into(),
            ))
        }
    };
    if let Some(s) = strategy {
        if s != catalog.strategy {
            return Err(Error::Catalog(format!(
                "requested strategy {s} but the catalog declares {}",
                catalog.strategy
            )));
        }
    }
    Ok(catalog)
}

pub fn read_token_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Scores a checkpoint on a gold corpus. With `oracle`, the gold spans are
/// scored against themselves, which pins the upper bound of the pipeline.
pub fn evaluate(
    checkpoint: &Checkpoint,
    gold: &[Sentence],
    catalog: Option<QueryCatalog>,
    decode: &DecodeConfig,
    oracle: bool,
    exec: Execution,
) -> Result<EvalReport> {
    let catalog = active_catalog(checkpoint, catalog)?;
    let pred = if oracle {
        gold.to_vec()
    } else {
        predict_sentences(checkpoint, &checkpoint.tags, &catalog, gold, decode, exec)?
    };
    evaluate_spans(gold, &pred, exec)
}

/// Files written by [`export_heatmap`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFiles {
    pub tokens: PathBuf,
    pub p_start: PathBuf,
    pub p_end: PathBuf,
    pub p_match: PathBuf,
    pub attention: PathBuf,
}

fn fmt_prob(v: f64) -> String {
    format!("{v:.12}")
}

/// Writes the boundary probabilities, the full start x end match grid
/// (blank below the diagonal) and the context-to-query attention of the toy
/// encoder as CSV matrices.
pub fn export_heatmap(checkpoint: &Checkpoint, example: &MrcExample, dir: impl AsRef<Path>) -> Result<HeatmapFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = checkpoint
        .model
        .forward(&MrcModel::input_for(example), Candidates::All)?;
    let n = example.context_len();
    let files = HeatmapFiles {
        tokens: dir.join("tokens.csv"),
        p_start: dir.join("p_start.csv"),
        p_end: dir.join("p_end.csv"),
        p_match: dir.join("p_match.csv"),
        attention: dir.join("attention.csv"),
    };

    let mut tokens = String::from("index,token\n");
    for (i, t) in example.context_tokens.iter().enumerate() {
        let _ = writeln!(tokens, "{i},\"{}\"", t.replace('"', "\"\""));
    }
    let column = |p: &ndarray::Array2<f64>| {
        let mut s = String::new();
        for i in 0..n {
            let _ = writeln!(s, "{}", fmt_prob(p[[i, 1]]));
        }
        s
    };
    let mut grid = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| {
                state
                    .probs
                    .p_match
                    .get(&(i, j))
                    .map(|&p| fmt_prob(p))
                    .unwrap_or_default()
            })
            .collect();
        let _ = writeln!(grid, "{}", row.join(","));
    }
    let mut attention = String::new();
    for row in state.encoder.attention.rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_prob(v)).collect();
        let _ = writeln!(attention, "{}", cells.join(","));
    }

    for (path, body) in [
        (&files.tokens, tokens),
        (&files.p_start, column(&state.probs.p_start)),
        (&files.p_end, column(&state.probs.p_end)),
        (&files.p_match, grid),
        (&files.attention, attention),
    ] {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

/// Loss of the current model on `examples`, without updating it.
pub fn mean_loss(model: &MrcModel, examples: &[MrcExample], w: &LossWeights, exec: Execution) -> Result<LossBreakdown> {
    let losses = par::map(exec, examples, |e| {
        let gold = make_label_tensors(e);
        let state = model.forward(&MrcModel::input_for(e), Candidates::Training(&gold))?;
        compute_loss(&state.probs, &gold, w)
    });
    let mut sum = LossBreakdown::default();
    for l in losses {
        let l = l?;
        sum.start += l.start;
        sum.end += l.end;
        sum.span += l.span;
        sum.total += l.total;
    }
    let n = examples.len().max(1) as f64;
    Ok(LossBreakdown {
        start: sum.start / n,
        end: sum.end / n,
        span: sum.span / n,
        total: sum.total / n,
    })
}
