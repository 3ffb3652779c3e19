//! Sentinel corpus generator.
//!
//! Each entity type `T` owns a family of sentinel tokens `<t>`, `<t.1>`,
//! `<t.2>`, ... A mention of `T` picks one variant uniformly and is rendered
//! as `( <t.k> ... <t.k> )` (or `( <t.k> )` for a single-token mention);
//! the gold span runs from the first sentinel to the last, inclusive, and the
//! parentheses sit just outside it. A mention may contain a mention of
//! another type, which gives nested spans. Distractor types are rendered the
//! same way but never labelled, so a model cannot simply fire on every
//! bracketed region.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::query::{QueryCatalog, QueryStrategy};
use crate::span::{is_nested, sort_spans, EntitySpan, TagSet};

pub const OPEN: &str = "(";
pub const CLOSE: &str = ")";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sentences: usize,
    /// Labelled types.
    pub types: Vec<String>,
    /// Rendered but unlabelled types.
    pub distractors: Vec<String>,
    /// Probability that each type appears in a sentence.
    pub presence: f64,
    /// Probability that one mention is nested inside another, when two or
    /// more are present.
    pub nesting: f64,
    pub fillers: usize,
    /// Sentinel variants per type.
    pub variants: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 500,
            types: vec!["A".into(), "B".into(), "C".into()],
            distractors: vec!["X".into(), "Y".into()],
            presence: 0.5,
            nesting: 0.9,
            fillers: 30,
            variants: 96,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

/// Variant `k` of the sentinel for `type_name`; variant 0 is `<t>`.
pub fn sentinel_variant(type_name: &str, k: usize) -> String {
    if k == 0 {
        format!("<{}>", type_name.to_lowercase())
    } else {
        format!("<{}.{k}>", type_name.to_lowercase())
    }
}

pub fn sentinel(type_name: &str) -> String {
    sentinel_variant(type_name, 0)
}

pub fn sentinels(type_name: &str, variants: usize) -> Vec<String> {
    (0..variants.max(1)).map(|k| sentinel_variant(type_name, k)).collect()
}

pub fn filler(i: usize) -> String {
    format!("w{i}")
}

/// Every token the generator can emit for `config`, plus sentinels for
/// `reserved` types. Plays the role of a fixed pretrained vocabulary.
pub fn vocabulary(config: &SyntheticConfig, reserved: &[String]) -> Vec<String> {
    let mut out = vec![OPEN.to_string(), CLOSE.to_string()];
    out.extend((0..config.fillers).map(filler));
    out.extend(
        config
            .types
            .iter()
            .chain(&config.distractors)
            .chain(reserved)
            .flat_map(|t| sentinels(t, config.variants)),
    );
    out
}

/// Queries that list every sentinel variant of each type.
pub fn sentinel_catalog(types: &[String], variants: usize) -> QueryCatalog {
    QueryCatalog {
        dataset_id: "synthetic".into(),
        strategy: QueryStrategy::AnnotationGuideline,
        entries: types
            .iter()
            .map(|t| {
                let marks = sentinels(t, variants).join(" ");
                (t.clone(), format!("find mentions marked with {marks}"))
            })
            .collect(),
    }
}

pub fn tag_set(config: &SyntheticConfig) -> Result<TagSet> {
    TagSet::new(config.types.iter().cloned())
}

struct Mention {
    type_name: String,
    child: Option<Box<Mention>>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config("synthetic corpus needs at least one type".into()));
        }
        if self.variants == 0 {
            return Err(Error::Config("synthetic corpus needs at least one sentinel variant".into()));
        }
        if self.fillers == 0 {
            return Err(Error::Config("synthetic corpus needs filler tokens".into()));
        }
        for p in [self.presence, self.nesting] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        let mut names: Vec<&String> = self.types.iter().chain(&self.distractors).collect();
        names.sort();
        names.dedup();
        if names.len() != self.types.len() + self.distractors.len() {
            return Err(Error::Config("type and distractor names must be distinct".into()));
        }
        Ok(())
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<Sentence>> {
    config.validate()?;
    let tags = tag_set(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all: Vec<&String> = config.types.iter().chain(&config.distractors).collect();
    let mut sentences = Vec::with_capacity(config.sentences);

    for k in 0..config.sentences {
        let mut present: Vec<&String> = all
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(config.presence))
            .collect();
        if !present.iter().any(|t| tags.get(t).is_some()) {
            present.push(config.types.choose(&mut rng).expect("non-empty"));
        }
        present.shuffle(&mut rng);

        let mut mentions: Vec<Mention> = Vec::new();
        let nest = present.len() >= 2 && rng.gen_bool(config.nesting);
        let mut iter = present.into_iter();
        if nest {
            let parent = iter.next().expect("two present");
            let child = iter.next().expect("two present");
            mentions.push(Mention {
                type_name: parent.clone(),
                child: Some(Box::new(Mention {
                    type_name: child.clone(),
                    child: None,
                })),
            });
        }
        mentions.extend(iter.map(|t| Mention {
            type_name: t.clone(),
            child: None,
        }));
        mentions.shuffle(&mut rng);

        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        push_fillers(&mut tokens, rng.gen_range(0..=2), config.fillers, &mut rng);
        for (i, mention) in mentions.iter().enumerate() {
            if i > 0 {
                push_fillers(&mut tokens, rng.gen_range(1..=3), config.fillers, &mut rng);
            }
            render(mention, &mut tokens, &mut spans, &tags, config, &mut rng)?;
        }
        push_fillers(&mut tokens, rng.gen_range(0..=2), config.fillers, &mut rng);
        sort_spans(&mut spans);
        sentences.push(Sentence {
            id: format!("{}-{k}", config.id_prefix),
            tokens,
            spans,
        });
    }
    Ok(sentences)
}

fn push_fillers(tokens: &mut Vec<String>, count: usize, fillers: usize, rng: &mut impl Rng) {
    for _ in 0..count {
        tokens.push(filler(rng.gen_range(0..fillers)));
    }
}

fn render(
    mention: &Mention,
    tokens: &mut Vec<String>,
    spans: &mut Vec<EntitySpan>,
    tags: &TagSet,
    config: &SyntheticConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let fillers = config.fillers;
    let mark = sentinel_variant(&mention.type_name, rng.gen_range(0..config.variants));
    tokens.push(OPEN.into());
    let start = tokens.len();
    tokens.push(mark.clone());
    let before = rng.gen_range(0..=2);
    let after = rng.gen_range(0..=2);
    let single = mention.child.is_none() && before + after == 0 && rng.gen_bool(0.5);
    if !single {
        push_fillers(tokens, before, fillers, rng);
        if let Some(child) = &mention.child {
            render(child, tokens, spans, tags, config, rng)?;
        }
        push_fillers(tokens, after, fillers, rng);
        tokens.push(mark);
    }
    let end = tokens.len() - 1;
    tokens.push(CLOSE.into());
    if let Some(t) = tags.get(&mention.type_name) {
        spans.push(EntitySpan::new(start, end, t.clone())?);
    }
    Ok(())
}

/// Corpus statistics used to check the generator's guarantees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub spans: usize,
    /// Spans that contain or are contained in another span of the sentence.
    pub nested_spans: usize,
    pub per_type: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn nested_fraction(&self) -> f64 {
        if self.spans == 0 {
            0.0
        } else {
            self.nested_spans as f64 / self.spans as f64
        }
    }
}

pub fn stats(sentences: &[Sentence]) -> CorpusStats {
    let mut out = CorpusStats {
        sentences: sentences.len(),
        ..CorpusStats::default()
    };
    for s in sentences {
        for (i, a) in s.spans.iter().enumerate() {
            out.spans += 1;
            *out.per_type.entry(a.entity_type.name.clone()).or_default() += 1;
            let nested = s
                .spans
                .iter()
                .enumerate()
                .any(|(j, b)| i != j && (is_nested(a, b) || is_nested(b, a)));
            if nested {
                out.nested_spans += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_are_delimited_by_sentinels() {
        let config = SyntheticConfig {
            sentences: 200,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&config).unwrap();
        assert_eq!(corpus.len(), 200);
        for s in &corpus {
            assert!(!s.tokens.is_empty());
            let mut seen = std::collections::HashSet::new();
            for span in &s.spans {
                span.validate(s.len()).unwrap();
                let marks = sentinels(&span.entity_type.name, config.variants);
                assert!(marks.contains(&s.tokens[span.start]));
                assert_eq!(s.tokens[span.end], s.tokens[span.start]);
                assert_eq!(s.tokens[span.start - 1], OPEN);
                assert_eq!(s.tokens[span.end + 1], CLOSE);
                assert!(seen.insert(span.entity_type.name.clone()), "one mention per type");
            }
            assert!(!s.spans.is_empty());
        }
    }

    #[test]
    fn default_corpus_is_nested_enough() {
        let corpus = generate(&SyntheticConfig::default()).unwrap();
        let st = stats(&corpus);
        assert!(st.nested_fraction() >= 0.2, "{st:?}");
        assert_eq!(st.per_type.len(), 3);
    }

    #[test]
    fn seeded_and_deterministic() {
        let config = SyntheticConfig::default();
        assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
        let other = SyntheticConfig { seed: 1, ..config.clone() };
        assert_ne!(generate(&config).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn sentinel_queries_mention_the_sentinel() {
        let catalog = sentinel_catalog(&["A".to_string(), "C".to_string()], 3);
        assert_eq!(catalog.entries["C"], "find mentions marked with <c> <c.1> <c.2>");
    }
}
