//! Start, end and start-end matching heads.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;

use super::encoder::{uniform1, uniform2, ReprMatrix};
use crate::data::LabelTensors;
use crate::error::{Error, Result};

/// Boundary matrices (`d x 2`) and the `2d` matching weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub t_start: Array2<f64>,
    pub t_end: Array2<f64>,
    pub match_weights: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(d: usize) -> Self {
        HeadParams {
            t_start: Array2::zeros((d, 2)),
            t_end: Array2::zeros((d, 2)),
            match_weights: Array1::zeros(2 * d),
        }
    }

    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        HeadParams {
            t_start: uniform2(d, 2, scale, rng),
            t_end: uniform2(d, 2, scale, rng),
            match_weights: uniform1(2 * d, scale, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.t_start.nrows()
    }

    pub fn add_assign(&mut self, other: &HeadParams) {
        self.t_start += &other.t_start;
        self.t_end += &other.t_end;
        self.match_weights += &other.match_weights;
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("t_start", self.t_start.as_slice().expect("standard layout")),
            ("t_end", self.t_end.as_slice().expect("standard layout")),
            ("match_weights", self.match_weights.as_slice().expect("standard layout")),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 3] {
        [
            ("t_start", self.t_start.as_slice_mut().expect("standard layout")),
            ("t_end", self.t_end.as_slice_mut().expect("standard layout")),
            ("match_weights", self.match_weights.as_slice_mut().expect("standard layout")),
        ]
    }

    pub(crate) fn shapes(d: usize) -> [Vec<usize>; 3] {
        [vec![d, 2], vec![d, 2], vec![2 * d]]
    }
}

/// Boundary and matching probabilities for one (sentence, type) query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbOutputs {
    /// `n x 2`, column 1 is "is a start".
    pub p_start: Array2<f64>,
    /// `n x 2`, column 1 is "is an end".
    pub p_end: Array2<f64>,
    /// Keyed by `(start, end)` with `start <= end`.
    pub p_match: BTreeMap<(usize, usize), f64>,
}

impl ProbOutputs {
    pub fn len(&self) -> usize {
        self.p_start.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p_start.nrows() == 0
    }
}

pub(crate) fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let peak = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - peak).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn boundary_probs(e: &ReprMatrix, t: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    if t.nrows() != e.dim() || t.ncols() != 2 {
        return Err(Error::Shape(format!(
            "{what}: representation has {} columns but weights are {}x{}",
            e.dim(),
            t.nrows(),
            t.ncols()
        )));
    }
    Ok(row_softmax(&e.0.dot(t)))
}

/// Row-wise softmax of `E . T_start`.
pub fn predict_start(e: &ReprMatrix, params: &HeadParams) -> Result<Array2<f64>> {
    boundary_probs(e, &params.t_start, "start head")
}

/// Row-wise softmax of `E . T_end`.
pub fn predict_end(e: &ReprMatrix, params: &HeadParams) -> Result<Array2<f64>> {
    boundary_probs(e, &params.t_end, "end head")
}

pub(crate) fn match_logit(
    row_i: ArrayView1<'_, f64>,
    row_j: ArrayView1<'_, f64>,
    weights: &Array1<f64>,
) -> f64 {
    let d = row_i.len();
    weights.slice(s![..d]).dot(&row_i) + weights.slice(s![d..]).dot(&row_j)
}

/// `sigmoid(m . [E_i; E_j])` for `0 <= i <= j < n`.
pub fn match_probability(e: &ReprMatrix, i: usize, j: usize, params: &HeadParams) -> Result<f64> {
    let n = e.rows();
    if i > j || j >= n {
        return Err(Error::MatchIndex { start: i, end: j, n });
    }
    if params.match_weights.len() != 2 * e.dim() {
        return Err(Error::Shape(format!(
            "match weights have length {}, expected {}",
            params.match_weights.len(),
            2 * e.dim()
        )));
    }
    Ok(sigmoid(match_logit(e.row(i), e.row(j), &params.match_weights)))
}

/// Pairs `(i, j)` with `i <= j` scored by the matching head.
///
/// With `gold`, starts and ends are the union of gold and predicted
/// boundaries (training); without, only predicted boundaries (inference).
pub fn candidate_pairs(
    gold: Option<&LabelTensors>,
    predicted_starts: &BTreeSet<usize>,
    predicted_ends: &BTreeSet<usize>,
) -> BTreeSet<(usize, usize)> {
    let mut starts = predicted_starts.clone();
    let mut ends = predicted_ends.clone();
    if let Some(gold) = gold {
        starts.extend(gold.starts());
        ends.extend(gold.ends());
    }
    let mut pairs = BTreeSet::new();
    for &i in &starts {
        for &j in ends.range(i..) {
            pairs.insert((i, j));
        }
    }
    pairs
}
