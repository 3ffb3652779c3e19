//! Span-level micro-averaged precision, recall and F1, plus the experiment
//! protocols built on it: zero-shot transfer to a new tag set, training-set
//! subsampling and query-strategy ablation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::AddAssign;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::par::{self, Execution};
use crate::query::{QueryCatalog, QueryStrategy};
use crate::span::TagSet;
use crate::train::{predict_sentences, train_model, TrainConfig};

/// Pooled counts and the ratios derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalResult {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalResult {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

impl AddAssign for EvalResult {
    fn add_assign(&mut self, other: EvalResult) {
        *self = EvalResult::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_);
    }
}

/// Overall result plus a per-type breakdown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: EvalResult,
    pub per_type: BTreeMap<String, EvalResult>,
}

type SpanKey<'a> = (usize, usize, &'a str);

fn span_keys(sentence: &Sentence) -> BTreeSet<SpanKey<'_>> {
    sentence
        .spans
        .iter()
        .map(|s| (s.start, s.end, s.entity_type.name.as_str()))
        .collect()
}

fn align<'a>(gold: &'a [Sentence], pred: &'a [Sentence]) -> Result<Vec<(&'a Sentence, &'a Sentence)>> {
    let by_id: BTreeMap<&str, &Sentence> = pred.iter().map(|s| (s.id.as_str(), s)).collect();
    if by_id.len() != pred.len() {
        return Err(Error::SentenceMismatch("duplicate sentence ids in predictions".into()));
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|s| s.id.as_str()).collect();
    if gold_ids.len() != gold.len() {
        return Err(Error::SentenceMismatch("duplicate sentence ids in gold".into()));
    }
    if let Some(missing) = gold.iter().find(|s| !by_id.contains_key(s.id.as_str())) {
        return Err(Error::SentenceMismatch(format!("no prediction for {:?}", missing.id)));
    }
    if let Some(extra) = pred.iter().find(|s| !gold_ids.contains(s.id.as_str())) {
        return Err(Error::SentenceMismatch(format!("no gold sentence {:?}", extra.id)));
    }
    Ok(gold.iter().map(|g| (g, by_id[g.id.as_str()])).collect())
}

fn count_sentence(gold: &Sentence, pred: &Sentence) -> BTreeMap<String, (usize, usize, usize)> {
    let g = span_keys(gold);
    let p = span_keys(pred);
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for key in &p {
        let c = counts.entry(key.2.to_string()).or_default();
        if g.contains(key) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for key in g.difference(&p) {
        counts.entry(key.2.to_string()).or_default().2 += 1;
    }
    counts
}

/// Exact-match span scoring pooled over the corpus, with a per-type split.
/// Duplicate identical spans count once.
pub fn evaluate_spans(gold: &[Sentence], pred: &[Sentence], exec: Execution) -> Result<EvalReport> {
    let pairs = align(gold, pred)?;
    let per_sentence = par::map(exec, &pairs, |(g, p)| count_sentence(g, p));
    let mut per_type: BTreeMap<String, EvalResult> = BTreeMap::new();
    for counts in per_sentence {
        for (name, (tp, fp, fn_)) in counts {
            *per_type.entry(name).or_default() += EvalResult::from_counts(tp, fp, fn_);
        }
    }
    let mut overall = EvalResult::default();
    for r in per_type.values() {
        overall += *r;
    }
    Ok(EvalReport { overall, per_type })
}

/// Micro-averaged P/R/F1 over all typed spans.
pub fn micro_prf(gold: &[Sentence], pred: &[Sentence]) -> Result<EvalResult> {
    Ok(evaluate_spans(gold, pred, Execution::Sequential)?.overall)
}

/// Source-to-target label correspondence, used only to split zero-shot
/// results into seen and unseen target types.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMapping(pub BTreeMap<String, String>);

impl LabelMapping {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let map: BTreeMap<String, String> = pairs.into_iter().collect();
        let targets: HashSet<&String> = map.values().collect();
        if targets.len() != map.len() {
            return Err(Error::Config("label mapping is not injective".into()));
        }
        Ok(LabelMapping(map))
    }

    /// Maps every source name present in `target` to itself.
    pub fn identity_overlap(source: &TagSet, target: &TagSet) -> Self {
        LabelMapping(
            source
                .types()
                .iter()
                .filter(|t| target.get(&t.name).is_some())
                .map(|t| (t.name.clone(), t.name.clone()))
                .collect(),
        )
    }

    pub fn is_seen_target(&self, name: &str) -> bool {
        self.0.values().any(|v| v == name)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ZeroShotReport {
    #[serde(flatten)]
    pub report: EvalReport,
    pub seen: EvalResult,
    pub unseen: EvalResult,
}

/// Queries a trained model with the target catalog's queries, without
/// retraining, and scores it in the target label space.
pub fn zero_shot_eval(
    checkpoint: &Checkpoint,
    target: &[Sentence],
    target_tags: &TagSet,
    target_catalog: &QueryCatalog,
    mapping: &LabelMapping,
    decode: &crate::decode::DecodeConfig,
    exec: Execution,
) -> Result<ZeroShotReport> {
    let predictions = predict_sentences(checkpoint, target_tags, target_catalog, target, decode, exec)?;
    let report = evaluate_spans(target, &predictions, exec)?;
    let mut seen = EvalResult::default();
    let mut unseen = EvalResult::default();
    for t in target_tags.types() {
        let r = report.per_type.get(&t.name).copied().unwrap_or_default();
        if mapping.is_seen_target(&t.name) {
            seen += r;
        } else {
            unseen += r;
        }
    }
    Ok(ZeroShotReport { report, seen, unseen })
}

/// `ceil(fraction * N)` sentences, drawn as a prefix of one seeded
/// permutation so smaller fractions are subsets of larger ones. Selected
/// sentences keep their corpus order.
pub fn subsample_training(sentences: &[Sentence], fraction: f64, seed: u64) -> Result<Vec<Sentence>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let n = sentences.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| sentences[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: QueryStrategy,
    pub result: EvalReport,
}

/// Trains one model per strategy under the same config and seed, then
/// scores each on `test`. A missing position-index catalog is generated.
#[allow(clippy::too_many_arguments)]
pub fn query_ablation_run(
    train: &[Sentence],
    test: &[Sentence],
    tags: &TagSet,
    strategies: &[QueryStrategy],
    catalogs: &BTreeMap<QueryStrategy, QueryCatalog>,
    config: &TrainConfig,
    extra_vocab: &[String],
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let catalog = match catalogs.get(&strategy) {
            Some(c) => c.clone(),
            None if strategy == QueryStrategy::PositionIndex => QueryCatalog::position_index("generated"),
            None => {
                return Err(Error::Catalog(format!("no catalog for strategy {strategy}")));
            }
        };
        if catalog.strategy != strategy {
            return Err(Error::Catalog(format!(
                "catalog for {strategy} declares strategy {}",
                catalog.strategy
            )));
        }
        let outcome = train_model(config, train, tags, &catalog, extra_vocab, exec)?;
        let predictions =
            predict_sentences(&outcome.checkpoint, tags, &catalog, test, &config.decode_config(), exec)?;
        rows.push(AblationRow {
            strategy,
            result: evaluate_spans(test, &predictions, exec)?,
        });
    }
    Ok(rows)
}
