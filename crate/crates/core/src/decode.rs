//! From probabilities to typed spans.
//!
//! Starts and ends are picked independently by row argmax, then the matching
//! head decides which (start, end) pairs form mentions. A start may pair
//! with several ends and vice versa, and every type is decoded on its own,
//! so nested and overlapping mentions survive decoding.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProbOutputs;
use crate::span::{resolve_flat_conflicts, sort_spans, EntitySpan, EntityType};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// A pair is emitted when its match probability is strictly above this.
    pub match_threshold: f64,
    /// Drop overlapping spans greedily by score after decoding.
    pub flat_mode: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            match_threshold: 0.5,
            flat_mode: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::Config(format!(
                "match threshold {} outside [0, 1]",
                self.match_threshold
            )));
        }
        Ok(())
    }
}

fn is_boundary(probs: &Array2<f64>, i: usize) -> bool {
    // an exact 0.5/0.5 tie is not a boundary
    probs[[i, 1]] > probs[[i, 0]]
}

/// Rows whose argmax is class 1, for the start and end heads.
pub fn extract_boundary_indexes(
    p_start: &Array2<f64>,
    p_end: &Array2<f64>,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let pick = |p: &Array2<f64>| (0..p.nrows()).filter(|&i| is_boundary(p, i)).collect();
    (pick(p_start), pick(p_end))
}

/// Emits `(i, j, entity_type)` for every `i <= j` from the two index sets whose
/// match probability exceeds the threshold.
pub fn match_and_emit(
    starts: &BTreeSet<usize>,
    ends: &BTreeSet<usize>,
    p_match: &BTreeMap<(usize, usize), f64>,
    config: &DecodeConfig,
    entity_type: &EntityType,
) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    for &i in starts {
        for &j in ends.range(i..) {
            let p = *p_match
                .get(&(i, j))
                .ok_or(Error::MissingMatchProbability(i, j))?;
            if p > config.match_threshold {
                spans.push(EntitySpan::new(i, j, entity_type.clone())?.with_score(p)?);
            }
        }
    }
    Ok(spans)
}

/// Decodes one sentence from per-type outputs. Output is sorted by
/// `(start, end, type index)`.
pub fn decode_sentence(
    per_type: &[(EntityType, ProbOutputs)],
    config: &DecodeConfig,
) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    for (entity_type, probs) in per_type {
        let (starts, ends) = extract_boundary_indexes(&probs.p_start, &probs.p_end);
        spans.extend(match_and_emit(&starts, &ends, &probs.p_match, config, entity_type)?);
    }
    if config.flat_mode {
        spans = resolve_flat_conflicts(&spans)?;
    }
    sort_spans(&mut spans);
    Ok(spans)
}

/// Reference decoder: scans every `(i, j)` with `i <= j` directly. Needs
/// match probabilities for all such pairs that pass the boundary tests.
pub fn brute_force_decode(
    p_start: &Array2<f64>,
    p_end: &Array2<f64>,
    p_match: &BTreeMap<(usize, usize), f64>,
    config: &DecodeConfig,
    entity_type: &EntityType,
) -> Result<Vec<EntitySpan>> {
    let n = p_start.nrows();
    let mut spans = Vec::new();
    for i in 0..n {
        for j in i..n {
            if !(p_start[[i, 1]] > p_start[[i, 0]] && p_end[[j, 1]] > p_end[[j, 0]]) {
                continue;
            }
            let p = *p_match
                .get(&(i, j))
                .ok_or(Error::MissingMatchProbability(i, j))?;
            if p > config.match_threshold {
                spans.push(EntitySpan::new(i, j, entity_type.clone())?.with_score(p)?);
            }
        }
    }
    sort_spans(&mut spans);
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ty(name: &str, index: usize) -> EntityType {
        EntityType {
            name: name.into(),
            index,
        }
    }

    fn keys(spans: &[EntitySpan]) -> Vec<(usize, usize, usize)> {
        spans.iter().map(EntitySpan::key).collect()
    }

    #[test]
    fn boundary_extraction() {
        let p = array![[0.3, 0.7], [0.8, 0.2], [0.1, 0.9]];
        let (starts, _) = extract_boundary_indexes(&p, &p);
        assert_eq!(starts, BTreeSet::from([0, 2]));

        let p = array![[0.9, 0.1], [0.9, 0.1]];
        assert!(extract_boundary_indexes(&p, &p).0.is_empty());

        let p = array![[0.5, 0.5], [0.4, 0.6]];
        assert_eq!(extract_boundary_indexes(&p, &p).0, BTreeSet::from([1]));
    }

    #[test]
    fn match_and_emit_example() {
        let starts = BTreeSet::from([1, 4]);
        let ends = BTreeSet::from([2, 4]);
        let p_match = BTreeMap::from([((1, 2), 0.9), ((1, 4), 0.1), ((4, 4), 0.8)]);
        let spans = match_and_emit(&starts, &ends, &p_match, &DecodeConfig::default(), &ty("A", 0))
            .unwrap();
        assert_eq!(keys(&spans), vec![(1, 2, 0), (4, 4, 0)]);
        assert_eq!(spans[0].score, Some(0.9));

        let none = match_and_emit(&BTreeSet::new(), &ends, &p_match, &DecodeConfig::default(), &ty("A", 0))
            .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn missing_match_probability_is_an_error() {
        let err = match_and_emit(
            &BTreeSet::from([0]),
            &BTreeSet::from([1]),
            &BTreeMap::new(),
            &DecodeConfig::default(),
            &ty("A", 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingMatchProbability(0, 1)));
    }

    fn outputs(n: usize, starts: &[usize], ends: &[usize], pairs: &[((usize, usize), f64)]) -> ProbOutputs {
        let col = |set: &[usize]| {
            Array2::from_shape_fn((n, 2), |(i, c)| match (set.contains(&i), c) {
                (true, 1) | (false, 0) => 0.9,
                _ => 0.1,
            })
        };
        ProbOutputs {
            p_start: col(starts),
            p_end: col(ends),
            p_match: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn nested_spans_across_types() {
        let per = ty("PER", 0);
        let org = ty("ORG", 1);
        let spans = decode_sentence(
            &[
                (per, outputs(4, &[1], &[1], &[((1, 1), 0.9)])),
                (org, outputs(4, &[0], &[3], &[((0, 3), 0.8)])),
            ],
            &DecodeConfig::default(),
        )
        .unwrap();
        assert_eq!(keys(&spans), vec![(0, 3, 1), (1, 1, 0)]);

        let empty = decode_sentence(
            &[(ty("PER", 0), outputs(4, &[], &[], &[]))],
            &DecodeConfig::default(),
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn flat_mode_keeps_best_overlapping_span() {
        let per = ty("PER", 0);
        let org = ty("ORG", 1);
        let config = DecodeConfig {
            flat_mode: true,
            ..DecodeConfig::default()
        };
        let spans = decode_sentence(
            &[
                (per, outputs(4, &[0], &[2], &[((0, 2), 0.9)])),
                (org, outputs(4, &[1], &[3], &[((1, 3), 0.8)])),
            ],
            &config,
        )
        .unwrap();
        assert_eq!(keys(&spans), vec![(0, 2, 0)]);
    }

    #[test]
    fn brute_force_small_cases() {
        let t = ty("A", 0);
        let o = outputs(1, &[0], &[0], &[((0, 0), 0.9)]);
        let spans = brute_force_decode(&o.p_start, &o.p_end, &o.p_match, &DecodeConfig::default(), &t)
            .unwrap();
        assert_eq!(keys(&spans), vec![(0, 0, 0)]);
        let strict = DecodeConfig {
            match_threshold: 1.0,
            flat_mode: false,
        };
        assert!(brute_force_decode(&o.p_start, &o.p_end, &o.p_match, &strict, &t)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn threshold_validation() {
        assert!(DecodeConfig { match_threshold: 1.5, flat_mode: false }.validate().is_err());
    }
}
