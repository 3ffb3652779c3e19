//! Entity types, tag sets and typed token spans.
//!
//! Span ends are inclusive everywhere in this crate, in every file format and
//! API: a single-token mention at position 3 is `(3, 3)`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An entity label and its position in the owning [`TagSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub index: usize,
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Ordered, non-empty list of entity types with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagSet {
    types: Vec<EntityType>,
}

impl TagSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut types = Vec::new();
        for (index, name) in names.into_iter().enumerate() {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::TagSet("empty type name".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::TagSet(format!("duplicate type name {name:?}")));
            }
            types.push(EntityType { name, index });
        }
        if types.is_empty() {
            return Err(Error::TagSet("tag set is empty".into()));
        }
        Ok(TagSet { types })
    }

    pub fn types(&self) -> &[EntityType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&EntityType> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.types.iter().map(|t| t.name.clone()).collect()
    }
}

impl TryFrom<Vec<String>> for TagSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        TagSet::new(names)
    }
}

impl From<TagSet> for Vec<String> {
    fn from(tags: TagSet) -> Self {
        tags.names()
    }
}

/// A typed, inclusive token interval, optionally carrying a model score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: EntityType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: EntityType) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidSpan(format!("start {start} > end {end}")));
        }
        Ok(EntitySpan {
            start,
            end,
            entity_type,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidSpan(format!("score {score} outside [0, 1]")));
        }
        self.score = Some(score);
        Ok(self)
    }

    /// Checks the span against the length of its sentence.
    pub fn validate(&self, sentence_len: usize) -> Result<()> {
        if self.start > self.end {
            return Err(Error::InvalidSpan(format!(
                "start {} > end {}",
                self.start, self.end
            )));
        }
        if self.end >= sentence_len {
            return Err(Error::InvalidSpan(format!(
                "end {} out of range for sentence of length {sentence_len}",
                self.end
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidSpan(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(start, end, type index)`: the identity used for scoring and sorting.
    pub fn key(&self) -> (usize, usize, usize) {
        (self.start, self.end, self.entity_type.index)
    }

    pub fn same_interval(&self, other: &EntitySpan) -> bool {
        self.start == other.start && self.end == other.end
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.start, self.end, self.entity_type)?;
        if let Some(s) = self.score {
            write!(f, "@{s:.4}")?;
        }
        Ok(())
    }
}

/// True iff the closed intervals of `a` and `b` intersect.
pub fn spans_overlap(a: &EntitySpan, b: &EntitySpan) -> bool {
    a.start <= b.end && b.start <= a.end
}

/// True iff `inner` lies within `outer` and the two intervals differ.
pub fn is_nested(outer: &EntitySpan, inner: &EntitySpan) -> bool {
    outer.start <= inner.start && inner.end <= outer.end && !outer.same_interval(inner)
}

/// Canonical ordering: `(start, end, type index)`.
pub fn sort_spans(spans: &mut [EntitySpan]) {
    spans.sort_by_key(|s| s.key());
}

/// Priority used by [`resolve_flat_conflicts`]: higher score first, then
/// smaller start, smaller end, smaller type index.
pub(crate) fn flat_priority(a: &EntitySpan, b: &EntitySpan) -> Ordering {
    let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
    sb.total_cmp(&sa).then_with(|| a.key().cmp(&b.key()))
}

/// Keeps a maximal non-overlapping subset, chosen greedily by descending
/// score. The result is returned in canonical order.
pub fn resolve_flat_conflicts(spans: &[EntitySpan]) -> Result<Vec<EntitySpan>> {
    if let Some(s) = spans.iter().find(|s| s.score.is_none()) {
        return Err(Error::MissingScore(s.to_string()));
    }
    let mut ranked: Vec<&EntitySpan> = spans.iter().collect();
    ranked.sort_by(|a, b| flat_priority(a, b));
    let mut kept: Vec<EntitySpan> = Vec::new();
    for span in ranked {
        if kept.iter().all(|k| !spans_overlap(k, span)) {
            kept.push(span.clone());
        }
    }
    sort_spans(&mut kept);
    Ok(kept)
}
