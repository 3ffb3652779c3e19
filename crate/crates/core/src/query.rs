//! Natural-language queries for entity types.
//!
//! Query wording is data: every strategy except [`QueryStrategy::PositionIndex`]
//! reads its texts from a catalog file, so swapping strategies is a
//! configuration change. Texts are stored untokenized.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::{EntityType, TagSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryStrategy {
    PositionIndex,
    Keyword,
    RuleTemplate,
    Wikipedia,
    Synonyms,
    KeywordSynonyms,
    AnnotationGuideline,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 7] = [
        QueryStrategy::PositionIndex,
        QueryStrategy::Keyword,
        QueryStrategy::RuleTemplate,
        QueryStrategy::Wikipedia,
        QueryStrategy::Synonyms,
        QueryStrategy::KeywordSynonyms,
        QueryStrategy::AnnotationGuideline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryStrategy::PositionIndex => "PositionIndex",
            QueryStrategy::Keyword => "Keyword",
            QueryStrategy::RuleTemplate => "RuleTemplate",
            QueryStrategy::Wikipedia => "Wikipedia",
            QueryStrategy::Synonyms => "Synonyms",
            QueryStrategy::KeywordSynonyms => "KeywordSynonyms",
            QueryStrategy::AnnotationGuideline => "AnnotationGuideline",
        }
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryStrategy {
    type Err = Error;

    /// Case-sensitive, exact enum names only.
    fn from_str(s: &str) -> Result<Self> {
        QueryStrategy::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Catalog(format!("unknown query strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCatalog {
    pub dataset_id: String,
    pub strategy: QueryStrategy,
    #[serde(default)]
    pub entries: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub entity_type: EntityType,
    pub text: String,
    pub strategy: QueryStrategy,
}

const CARDINALS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
    "twenty",
];

/// Query naming a type only by its 1-based position: "one", "two", ... up to
/// "twenty", then decimal numerals.
pub fn build_position_index_query(t: &EntityType) -> Query {
    let text = CARDINALS
        .get(t.index)
        .map(|w| w.to_string())
        .unwrap_or_else(|| (t.index + 1).to_string());
    Query {
        entity_type: t.clone(),
        text,
        strategy: QueryStrategy::PositionIndex,
    }
}

impl QueryCatalog {
    /// An empty position-index catalog; all its queries are generated.
    pub fn position_index(dataset_id: impl Into<String>) -> Self {
        QueryCatalog {
            dataset_id: dataset_id.into(),
            strategy: QueryStrategy::PositionIndex,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Catalog(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Shipped catalog for an ORG/LOC/FAC tag set.
    pub fn builtin(strategy: QueryStrategy) -> Self {
        let text = match strategy {
            QueryStrategy::PositionIndex => include_str!("../catalogs/default/position_index.json"),
            QueryStrategy::Keyword => include_str!("../catalogs/default/keyword.json"),
            QueryStrategy::RuleTemplate => include_str!("../catalogs/default/rule_template.json"),
            QueryStrategy::Wikipedia => include_str!("../catalogs/default/wikipedia.json"),
            QueryStrategy::Synonyms => include_str!("../catalogs/default/synonyms.json"),
            QueryStrategy::KeywordSynonyms => {
                include_str!("../catalogs/default/keyword_synonyms.json")
            }
            QueryStrategy::AnnotationGuideline => {
                include_str!("../catalogs/default/annotation_guideline.json")
            }
        };
        QueryCatalog::from_json(text).expect("builtin catalog parses")
    }
}

/// The query for `t` under `catalog`.
pub fn lookup_query(catalog: &QueryCatalog, t: &EntityType) -> Result<Query> {
    match catalog.entries.get(&t.name) {
        Some(text) if !text.trim().is_empty() => Ok(Query {
            entity_type: t.clone(),
            text: text.clone(),
            strategy: catalog.strategy,
        }),
        _ if catalog.strategy == QueryStrategy::PositionIndex => Ok(build_position_index_query(t)),
        _ => Err(Error::CatalogIncomplete(t.name.clone())),
    }
}

/// One diagnostic per tag whose query is missing or empty.
pub fn validate_catalog(catalog: &QueryCatalog, tags: &TagSet) -> Vec<String> {
    let mut diagnostics = Vec::new();
    for t in tags.types() {
        match catalog.entries.get(&t.name) {
            Some(text) if text.trim().is_empty() => {
                diagnostics.push(format!("empty query: {}", t.name))
            }
            Some(_) => {}
            None if catalog.strategy == QueryStrategy::PositionIndex => {}
            None => diagnostics.push(format!("missing query: {}", t.name)),
        }
    }
    diagnostics
}

/// Errors with every diagnostic joined when the catalog does not cover `tags`.
pub fn ensure_valid(catalog: &QueryCatalog, tags: &TagSet) -> Result<()> {
    let diagnostics = validate_catalog(catalog, tags);
    if diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Error::Catalog(diagnostics.join("; ")))
    }
}
