//! Command-line front end for the `mrc-ner` library.
//!
//! Exit status is 0 on success, 1 when input, configuration or catalogs are
//! invalid, and 2 for runtime failures such as I/O errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mrc_ner::data::{
    build_triples, infer_tag_set, read_records, records_to_sentences, write_span_jsonl, write_triples,
    MrcExample, SpanRecord,
};
use mrc_ner::decode::DecodeConfig;
use mrc_ner::eval::{query_ablation_run, zero_shot_eval, LabelMapping};
use mrc_ner::model::checkpoint::{write_atomic, Checkpoint};
use mrc_ner::par::Execution;
use mrc_ner::query::{lookup_query, QueryCatalog, QueryStrategy};
use mrc_ner::synthetic::{self, SyntheticConfig};
use mrc_ner::train::{self, TrainConfig, CHECKPOINT_FILE};
use mrc_ner::{Error, TagSet};
use tracing::info;

/// Optional root for relative output paths.
const HOME_VAR: &str = "MRC_NER_HOME";

#[derive(Parser)]
#[command(name = "mrc-ner", version, about = "Named entity recognition as reading comprehension")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CoNLL or span-JSONL corpus into span JSONL and MRC triples.
    BuildData(BuildData),
    /// Train a model and write its checkpoint and run manifest.
    Train(TrainArgs),
    /// Tag sentences with a trained model.
    Predict(Predict),
    /// Score a trained model on a gold corpus.
    Evaluate(Evaluate),
    /// Train one model per query strategy and compare test scores.
    AblateQueries(Ablate),
    /// Query a trained model with another tag set's queries.
    ZeroShot(ZeroShot),
    /// Write the probability matrices of one (sentence, type) query as CSV.
    ExportHeatmap(Heatmap),
    /// Generate the sentinel-marked synthetic corpus.
    GenSynthetic(GenSynthetic),
}

#[derive(Args)]
struct CatalogArgs {
    /// Query catalog JSON.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    query_strategy: Option<QueryStrategy>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    match_threshold: Option<f64>,
    /// Keep only non-overlapping spans, highest score first.
    #[arg(long)]
    flat_mode: bool,
}

impl DecodeArgs {
    fn config(&self) -> Result<DecodeConfig> {
        let defaults = DecodeConfig::default();
        let config = DecodeConfig {
            match_threshold: self.match_threshold.unwrap_or(defaults.match_threshold),
            flat_mode: self.flat_mode,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct BuildData {
    /// Input corpus (`.conll`/`.txt` BIO or `.jsonl` spans).
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated tag set; inferred from the corpus when omitted.
    #[arg(long, value_delimiter = ',')]
    tags: Vec<String>,
    #[command(flatten)]
    catalog: CatalogArgs,
    #[arg(long)]
    char_level: bool,
    /// Where to write the normalized span JSONL.
    #[arg(long)]
    spans_out: Option<PathBuf>,
    /// Where to write one MRC triple per (sentence, type).
    #[arg(long)]
    triples_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    match_threshold: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    flat_mode: Option<bool>,
    #[arg(long)]
    subsample_fraction: Option<f64>,
    #[arg(long)]
    query_strategy: Option<QueryStrategy>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Extra vocabulary, one token per line.
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tags: Vec<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    char_level: Option<bool>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            seed => c.seed,
            epochs => c.epochs,
            batch_size => c.batch_size,
            learning_rate => c.learning_rate,
            alpha => c.alpha,
            beta => c.beta,
            gamma => c.gamma,
            match_threshold => c.match_threshold,
            flat_mode => c.flat_mode,
            subsample_fraction => c.subsample_fraction,
            char_level => c.char_level,
            output_dir => c.output_dir,
            dim => c.encoder.dim,
            layers => c.encoder.layers,
            temperature => c.encoder.temperature,
        );
        if self.query_strategy.is_some() {
            c.query_strategy = self.query_strategy;
        }
        for (flag, field) in [
            (&self.catalog, &mut c.catalog_path),
            (&self.train, &mut c.train_path),
            (&self.test, &mut c.test_path),
            (&self.vocabulary, &mut c.vocabulary_path),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
        if !self.tags.is_empty() {
            c.tags = self.tags.clone();
        }
        c.output_dir = output_path(&c.output_dir);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentences to tag: span JSONL, CoNLL, or `.txt` with one sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Catalog to query with instead of the one stored in the checkpoint.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Score the gold spans against themselves.
    #[arg(long)]
    oracle: bool,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    train: TrainArgs,
    /// Strategies to compare; all seven when omitted.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<QueryStrategy>,
    /// Catalog for one strategy, as `STRATEGY=PATH`. Strategies without one
    /// use the shipped ORG/LOC/FAC catalogs.
    #[arg(long = "catalog-for", value_parser = parse_strategy_path)]
    catalogs: Vec<(QueryStrategy, PathBuf)>,
}

#[derive(Args)]
struct ZeroShot {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target corpus, labelled in the target tag set.
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    /// Target tag set; inferred from the target corpus when omitted.
    #[arg(long, value_delimiter = ',')]
    target_tags: Vec<String>,
    /// Source-to-target label pairs, `SRC=TGT`; identical names when omitted.
    #[arg(long = "map", value_parser = parse_pair)]
    mapping: Vec<(String, String)>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Heatmap {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Sentence id; the first sentence when omitted.
    #[arg(long)]
    sentence: Option<String>,
    /// Entity type to query for.
    #[arg(long = "type")]
    entity_type: String,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenSynthetic {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    sentences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    types: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    distractors: Vec<String>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    id_prefix: Option<String>,
    /// Write a catalog whose queries name each type's sentinels.
    #[arg(long)]
    catalog_out: Option<PathBuf>,
    /// Write the full token inventory, for use as `--vocabulary`.
    #[arg(long)]
    vocabulary_out: Option<PathBuf>,
    /// Types whose sentinels are added to the vocabulary without being generated.
    #[arg(long, value_delimiter = ',')]
    reserve: Vec<String>,
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.to_string(), v.to_string()))
}

fn parse_strategy_path(s: &str) -> std::result::Result<(QueryStrategy, PathBuf), String> {
    let (k, v) = parse_pair(s)?;
    Ok((k.parse().map_err(|e: Error| e.to_string())?, PathBuf::from(v)))
}

/// Relative output paths live under `$MRC_NER_HOME` when it is set.
fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(HOME_VAR) {
        Some(home) if path.is_relative() => PathBuf::from(home).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let path = output_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn optional_catalog(path: &Option<PathBuf>) -> Result<Option<QueryCatalog>> {
    Ok(match path {
        Some(p) => Some(QueryCatalog::load(p)?),
        None => None,
    })
}

fn tag_set(names: &[String], records: &[SpanRecord]) -> Result<TagSet> {
    Ok(if names.is_empty() {
        infer_tag_set(records)?
    } else {
        TagSet::new(names.iter().cloned())?
    })
}

fn build_data(args: &BuildData, exec: Execution) -> Result<()> {
    let records = read_records(&args.input)?;
    let tags = tag_set(&args.tags, &records)?;
    let sentences = records_to_sentences(records, &tags)?;
    if let Some(out) = &args.spans_out {
        let out = output_path(out);
        ensure_parent(&out)?;
        write_span_jsonl(&out, &sentences)?;
    }
    if let Some(out) = &args.triples_out {
        let catalog = train::load_catalog(args.catalog.catalog.as_deref(), args.catalog.query_strategy)?;
        let tokenizer = train::tokenizer(args.char_level);
        let examples = build_triples(&sentences, &tags, &catalog, tokenizer.as_ref(), exec)?;
        let out = output_path(out);
        ensure_parent(&out)?;
        write_triples(&out, &examples)?;
        info!(examples = examples.len(), "wrote triples");
    }
    info!(sentences = sentences.len(), tags = ?tags.names(), "corpus read");
    Ok(())
}

fn run_train(args: &TrainArgs, exec: Execution) -> Result<()> {
    let config = args.resolve()?;
    let (_, manifest) = train::train(&config, exec)?;
    info!(dir = %config.output_dir.display(), "wrote {CHECKPOINT_FILE}");
    print_json(&manifest)
}

fn predict(args: &Predict, exec: Execution) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let catalog = train::active_catalog(&checkpoint, optional_catalog(&args.catalog)?)?;
    let sentences = train::read_prediction_input(&args.input)?;
    let pred = train::predict_sentences(
        &checkpoint,
        &checkpoint.tags,
        &catalog,
        &sentences,
        &args.decode.config()?,
        exec,
    )?;
    let out = output_path(&args.out);
    ensure_parent(&out)?;
    write_span_jsonl(&out, &pred)?;
    info!(sentences = pred.len(), "predictions written");
    Ok(())
}

fn evaluate(args: &Evaluate, exec: Execution) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let gold = train::read_gold(&args.gold, &checkpoint.tags)?;
    let report = train::evaluate(
        &checkpoint,
        &gold,
        optional_catalog(&args.catalog)?,
        &args.decode.config()?,
        args.oracle,
        exec,
    )?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn ablate(args: &Ablate, exec: Execution) -> Result<()> {
    let config = args.train.resolve()?;
    let train_path = config
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("--train is required".into()))?;
    let test_path = config
        .test_path
        .as_ref()
        .ok_or_else(|| Error::Config("--test is required".into()))?;
    let records = read_records(train_path)?;
    let tags = tag_set(&config.tags, &records)?;
    let train_set = records_to_sentences(records, &tags)?;
    let test_set = train::read_gold(test_path, &tags)?;
    let extra = match &config.vocabulary_path {
        Some(p) => train::read_token_list(p)?,
        None => Vec::new(),
    };
    let strategies = if args.strategies.is_empty() {
        QueryStrategy::ALL.to_vec()
    } else {
        args.strategies.clone()
    };
    let mut catalogs = BTreeMap::new();
    for (strategy, path) in &args.catalogs {
        catalogs.insert(*strategy, QueryCatalog::load(path)?);
    }
    for &s in &strategies {
        if s != QueryStrategy::PositionIndex {
            catalogs.entry(s).or_insert_with(|| QueryCatalog::builtin(s));
        }
    }
    let rows = query_ablation_run(&train_set, &test_set, &tags, &strategies, &catalogs, &config, &extra, exec)?;
    write_json(&config.output_dir.join("ablation.json"), &rows)?;
    print_json(&rows)
}

fn zero_shot(args: &ZeroShot, exec: Execution) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let records = read_records(&args.target)?;
    let target_tags = tag_set(&args.target_tags, &records)?;
    let target = records_to_sentences(records, &target_tags)?;
    let catalog = train::load_catalog(args.catalog.catalog.as_deref(), args.catalog.query_strategy)?;
    let mapping = if args.mapping.is_empty() {
        LabelMapping::identity_overlap(&checkpoint.tags, &target_tags)
    } else {
        LabelMapping::new(args.mapping.iter().cloned())?
    };
    let report = zero_shot_eval(
        &checkpoint,
        &target,
        &target_tags,
        &catalog,
        &mapping,
        &args.decode.config()?,
        exec,
    )?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn export_heatmap(args: &Heatmap) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let catalog = train::active_catalog(&checkpoint, optional_catalog(&args.catalog)?)?;
    let sentences = train::read_prediction_input(&args.input)?;
    let sentence = match &args.sentence {
        Some(id) => sentences.iter().find(|s| &s.id == id),
        None => sentences.first(),
    }
    .ok_or_else(|| Error::Config("no matching sentence in the input".into()))?;
    let entity_type = checkpoint
        .tags
        .get(&args.entity_type)
        .ok_or_else(|| Error::Config(format!("type {} is not in the checkpoint tag set", args.entity_type)))?
        .clone();
    let query = lookup_query(&catalog, &entity_type)?;
    let example = MrcExample {
        sentence_id: sentence.id.clone(),
        entity_type,
        query_tokens: train::tokenizer(checkpoint.char_level).tokenize(&query.text),
        query_text: query.text,
        context_tokens: sentence.tokens.clone(),
        answers: Vec::new(),
    };
    let files = train::export_heatmap(&checkpoint, &example, output_path(&args.out_dir))?;
    info!(?files, "heat map written");
    Ok(())
}

fn gen_synthetic(args: &GenSynthetic) -> Result<()> {
    let defaults = SyntheticConfig::default();
    let config = SyntheticConfig {
        sentences: args.sentences,
        seed: args.seed,
        types: if args.types.is_empty() { defaults.types.clone() } else { args.types.clone() },
        distractors: if args.distractors.is_empty() {
            defaults.distractors.clone()
        } else {
            args.distractors.clone()
        },
        variants: args.variants.unwrap_or(defaults.variants),
        id_prefix: args.id_prefix.clone().unwrap_or(defaults.id_prefix.clone()),
        ..defaults
    };
    let sentences = synthetic::generate(&config)?;
    let out = output_path(&args.out);
    ensure_parent(&out)?;
    write_span_jsonl(&out, &sentences)?;
    if let Some(path) = &args.catalog_out {
        let mut types = config.types.clone();
        types.extend(args.reserve.iter().cloned());
        let path = output_path(path);
        ensure_parent(&path)?;
        synthetic::sentinel_catalog(&types, config.variants).save(&path)?;
    }
    if let Some(path) = &args.vocabulary_out {
        let path = output_path(path);
        ensure_parent(&path)?;
        let mut text = synthetic::vocabulary(&config, &args.reserve).join("\n");
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&synthetic::stats(&sentences))
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::BuildData(a) => build_data(a, exec),
        Command::Train(a) => run_train(a, exec),
        Command::Predict(a) => predict(a, exec),
        Command::Evaluate(a) => evaluate(a, exec),
        Command::AblateQueries(a) => ablate(a, exec),
        Command::ZeroShot(a) => zero_shot(a, exec),
        Command::ExportHeatmap(a) => export_heatmap(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their
/// parent message.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
