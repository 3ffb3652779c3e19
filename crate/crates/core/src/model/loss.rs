//! Joint training objective: token-averaged cross-entropy on both boundary
//! heads plus pair-averaged binary cross-entropy on the matching head.

use serde::{Deserialize, Serialize};

use super::heads::ProbOutputs;
use crate::data::LabelTensors;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("loss weight {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub start: f64,
    pub end: f64,
    pub span: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.span.is_finite() && self.total.is_finite()
    }
}

fn boundary_ce(probs: &ndarray::Array2<f64>, labels: &[u8]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, usize::from(y == 1)]].ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// `alpha * L_start + beta * L_end + gamma * L_span`.
///
/// The candidate set is the key set of `probs.p_match`; it must contain
/// every gold pair. An empty candidate set contributes zero span loss.
pub fn compute_loss(probs: &ProbOutputs, gold: &LabelTensors, w: &LossWeights) -> Result<LossBreakdown> {
    let start = boundary_ce(&probs.p_start, &gold.y_start)?;
    let end = boundary_ce(&probs.p_end, &gold.y_end)?;
    if let Some(&(i, j)) = gold.y_match.iter().find(|p| !probs.p_match.contains_key(p)) {
        return Err(Error::MissingCandidate(i, j));
    }
    let span = if probs.p_match.is_empty() {
        0.0
    } else {
        let total: f64 = probs
            .p_match
            .iter()
            .map(|(pair, &p)| {
                if gold.y_match.contains(pair) {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        total / probs.p_match.len() as f64
    };
    Ok(LossBreakdown {
        start,
        end,
        span,
        total: w.alpha * start + w.beta * end + w.gamma * span,
    })
}
