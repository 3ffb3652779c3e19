//! Encoder contract and the reference toy encoder.
//!
//! An encoder maps `[CLS] query [SEP] context` to one `d`-dimensional row
//! per context token; query rows are dropped. Pretrained encoders plug in
//! through [`Encoder`] and must report rows at corpus-token granularity.
//!
//! The toy encoder is small enough to train on a laptop:
//!
//! 1. token embeddings for query and context;
//! 2. a query-match feature per context token: a temperature-softmax over
//!    the cosine similarities between the token and every query token,
//!    averaged under those weights;
//! 3. `layers` rounds of bidirectional mixing,
//!    `h'_i = tanh(Ws h_i + Wl h_{i-1} + Wr h_{i+1} + u m_i + Wq q + b)`,
//!    where `q` is the mean query embedding and out-of-range neighbours are
//!    zero.
//!
//! Every step has a hand-written backward pass, checked against finite
//! differences in the test suites.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const NORM_EPS: f64 = 1e-8;

/// Combined `[CLS] q_1..q_m [SEP] x_1..x_n` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub tokens: Vec<String>,
    pub context: Range<usize>,
}

impl EncoderInput {
    pub fn new(query: &[String], context: &[String]) -> Self {
        let mut tokens = Vec::with_capacity(query.len() + context.len() + 2);
        tokens.push(CLS.to_string());
        tokens.extend(query.iter().cloned());
        tokens.push(SEP.to_string());
        let start = tokens.len();
        tokens.extend(context.iter().cloned());
        EncoderInput {
            context: start..tokens.len(),
            tokens,
        }
    }

    pub fn query_range(&self) -> Range<usize> {
        1..self.context.start.saturating_sub(1).max(1)
    }

    pub fn query_tokens(&self) -> &[String] {
        &self.tokens[self.query_range()]
    }

    pub fn context_tokens(&self) -> &[String] {
        &self.tokens[self.context.clone()]
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }
}

/// Context representation, one row per context token.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprMatrix(pub Array2<f64>);

impl ReprMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape(format!(
                "representation must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("representation has non-finite entries".into()));
        }
        Ok(ReprMatrix(values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Rows for exactly the context positions of `input`. Inputs longer
    /// than [`Encoder::max_len`] are rejected, never truncated.
    fn encode(&self, input: &EncoderInput) -> Result<ReprMatrix>;
}

/// Token vocabulary; id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens first, then `tokens` in first-seen order.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [UNK, CLS, SEP] {
            vocab.insert(t);
        }
        for t in tokens {
            vocab.insert(t.as_ref());
        }
        vocab
    }

    /// Rebuilds a vocabulary from its exact token list, e.g. from a checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Checkpoint("vocabulary must start with [UNK]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len() as u32);
            self.tokens.push(token.to_string());
        }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub dim: usize,
    pub layers: usize,
    /// Sharpness of the softmax over query-token similarities.
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            dim: 24,
            layers: 2,
            temperature: 8.0,
            max_len: 512,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("encoder dim must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder layers must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("encoder temperature must be > 0".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("encoder max_len must be >= 3".into()));
        }
        Ok(())
    }
}

/// Weights of one mixing layer; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MixLayer {
    pub w_self: Array2<f64>,
    pub w_left: Array2<f64>,
    pub w_right: Array2<f64>,
    pub w_query: Array2<f64>,
    pub u_match: Array1<f64>,
    pub bias: Array1<f64>,
}

impl MixLayer {
    pub fn zeros(d: usize) -> Self {
        MixLayer {
            w_self: Array2::zeros((d, d)),
            w_left: Array2::zeros((d, d)),
            w_right: Array2::zeros((d, d)),
            w_query: Array2::zeros((d, d)),
            u_match: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        MixLayer {
            w_self: uniform2(d, d, scale, rng),
            w_left: uniform2(d, d, scale, rng),
            w_right: uniform2(d, d, scale, rng),
            w_query: uniform2(d, d, scale, rng),
            u_match: uniform1(d, scale, rng),
            bias: Array1::zeros(d),
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w_self", self.w_self.as_slice().expect("standard layout")),
            ("w_left", self.w_left.as_slice().expect("standard layout")),
            ("w_right", self.w_right.as_slice().expect("standard layout")),
            ("w_query", self.w_query.as_slice().expect("standard layout")),
            ("u_match", self.u_match.as_slice().expect("standard layout")),
            ("bias", self.bias.as_slice().expect("standard layout")),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("w_self", self.w_self.as_slice_mut().expect("standard layout")),
            ("w_left", self.w_left.as_slice_mut().expect("standard layout")),
            ("w_right", self.w_right.as_slice_mut().expect("standard layout")),
            ("w_query", self.w_query.as_slice_mut().expect("standard layout")),
            ("u_match", self.u_match.as_slice_mut().expect("standard layout")),
            ("bias", self.bias.as_slice_mut().expect("standard layout")),
        ]
    }

    pub(crate) fn shapes(d: usize) -> [Vec<usize>; 6] {
        [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
        ]
    }
}

pub(crate) fn uniform2(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..=scale))
}

pub(crate) fn uniform1(len: usize, scale: f64, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.gen_range(-scale..=scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    pub vocab: Vocab,
    /// `vocab.len() x dim`.
    pub embedding: Array2<f64>,
    pub layers: Vec<MixLayer>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    context_ids: Vec<u32>,
    query_ids: Vec<u32>,
    x: Array2<f64>,
    q: Array2<f64>,
    x_norm: Array1<f64>,
    q_norm: Array1<f64>,
    cos: Array2<f64>,
    /// Softmax weights of each context token over the query tokens.
    pub attention: Array2<f64>,
    pub match_feature: Array1<f64>,
    q_mean: Array1<f64>,
    /// `hidden[0]` is the embedding input; `hidden[l + 1]` the output of layer `l`.
    hidden: Vec<Array2<f64>>,
}

impl EncoderCache {
    pub fn output(&self) -> &Array2<f64> {
        self.hidden.last().expect("at least one layer")
    }
}

/// Gradients of the toy encoder. Embedding rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embedding: BTreeMap<u32, Array1<f64>>,
    pub layers: Vec<MixLayer>,
}

impl EncoderGrads {
    pub fn zeros(config: &ToyEncoderConfig) -> Self {
        EncoderGrads {
            embedding: BTreeMap::new(),
            layers: (0..config.layers).map(|_| MixLayer::zeros(config.dim)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (id, row) in &other.embedding {
            *self
                .embedding
                .entry(*id)
                .or_insert_with(|| Array1::zeros(row.len())) += row;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w_self += &b.w_self;
            a.w_left += &b.w_left;
            a.w_right += &b.w_right;
            a.w_query += &b.w_query;
            a.u_match += &b.u_match;
            a.bias += &b.bias;
        }
    }

    fn add_embedding_rows(&mut self, ids: &[u32], rows: &Array2<f64>) {
        for (id, row) in ids.iter().zip(rows.rows()) {
            *self
                .embedding
                .entry(*id)
                .or_insert_with(|| Array1::zeros(row.len())) += &row;
        }
    }
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let scale = 1.0 / (d as f64).sqrt();
        let embedding = uniform2(vocab.len(), d, scale, rng);
        let layers = (0..config.layers).map(|_| MixLayer::random(d, rng)).collect();
        Ok(ToyEncoder {
            config,
            vocab,
            embedding,
            layers,
        })
    }

    fn check_len(&self, input: &EncoderInput) -> Result<()> {
        if input.tokens.len() > self.config.max_len {
            return Err(Error::Overflow {
                len: input.tokens.len(),
                max: self.config.max_len,
            });
        }
        if input.context.is_empty() || input.context.end > input.tokens.len() {
            return Err(Error::Shape("encoder input has an empty context".into()));
        }
        Ok(())
    }

    fn gather(&self, ids: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.config.dim));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&self.embedding.row(id as usize));
        }
        out
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<EncoderCache> {
        self.check_len(input)?;
        let context_ids = self.vocab.ids(input.context_tokens());
        let query_ids = self.vocab.ids(input.query_tokens());
        let x = self.gather(&context_ids);
        let q = self.gather(&query_ids);
        let (n, m, d) = (x.nrows(), q.nrows(), self.config.dim);
        let tau = self.config.temperature;

        let x_norm = x.map_axis(Axis(1), |r| (r.dot(&r) + NORM_EPS).sqrt());
        let q_norm = q.map_axis(Axis(1), |r| (r.dot(&r) + NORM_EPS).sqrt());
        let mut cos = x.dot(&q.t());
        for i in 0..n {
            for k in 0..m {
                cos[[i, k]] /= x_norm[i] * q_norm[k];
            }
        }
        let mut attention = Array2::zeros((n, m));
        let mut match_feature = Array1::zeros(n);
        for i in 0..n {
            if m == 0 {
                break;
            }
            let row = cos.row(i);
            let peak = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut total = 0.0;
            for k in 0..m {
                let w = (tau * (row[k] - peak)).exp();
                attention[[i, k]] = w;
                total += w;
            }
            let mut feature = 0.0;
            for k in 0..m {
                attention[[i, k]] /= total;
                feature += attention[[i, k]] * row[k];
            }
            match_feature[i] = feature;
        }
        let q_mean = if m == 0 {
            Array1::zeros(d)
        } else {
            q.mean_axis(Axis(0)).expect("non-empty query")
        };

        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        hidden.push(x.clone());
        for layer in &self.layers {
            let h = hidden.last().expect("input pushed");
            let mut z = h.dot(&layer.w_self.t());
            let left = h.dot(&layer.w_left.t());
            let right = h.dot(&layer.w_right.t());
            let shared = layer.w_query.dot(&q_mean) + &layer.bias;
            for i in 0..n {
                let mut zi = z.row_mut(i);
                if i > 0 {
                    zi += &left.row(i - 1);
                }
                if i + 1 < n {
                    zi += &right.row(i + 1);
                }
                zi.scaled_add(match_feature[i], &layer.u_match);
                zi += &shared;
            }
            z.mapv_inplace(f64::tanh);
            hidden.push(z);
        }

        Ok(EncoderCache {
            context_ids,
            query_ids,
            x,
            q,
            x_norm,
            q_norm,
            cos,
            attention,
            match_feature,
            q_mean,
            hidden,
        })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output rows).
    pub fn backward(&self, cache: &EncoderCache, d_out: &Array2<f64>) -> EncoderGrads {
        let n = cache.x.nrows();
        let m = cache.q.nrows();
        let d = self.config.dim;
        let tau = self.config.temperature;
        let mut grads = EncoderGrads::zeros(&self.config);
        let mut d_h = d_out.clone();
        let mut d_match = Array1::<f64>::zeros(n);
        let mut d_q_mean = Array1::<f64>::zeros(d);

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let h_in = &cache.hidden[l];
            let h_out = &cache.hidden[l + 1];
            let d_z = &d_h * &h_out.mapv(|v| 1.0 - v * v);
            let g = &mut grads.layers[l];

            g.w_self += &d_z.t().dot(h_in);
            if n > 1 {
                let dz_tail = d_z.slice(ndarray::s![1.., ..]);
                let dz_head = d_z.slice(ndarray::s![..n - 1, ..]);
                g.w_left += &dz_tail.t().dot(&h_in.slice(ndarray::s![..n - 1, ..]));
                g.w_right += &dz_head.t().dot(&h_in.slice(ndarray::s![1.., ..]));
            }
            let dz_sum = d_z.sum_axis(Axis(0));
            g.u_match += &d_z.t().dot(&cache.match_feature);
            g.bias += &dz_sum;
            for a in 0..d {
                for b in 0..d {
                    g.w_query[[a, b]] += dz_sum[a] * cache.q_mean[b];
                }
            }
            d_match += &d_z.dot(&layer.u_match);
            d_q_mean += &layer.w_query.t().dot(&dz_sum);

            let mut d_in = d_z.dot(&layer.w_self);
            if n > 1 {
                let via_left = d_z.dot(&layer.w_left);
                let via_right = d_z.dot(&layer.w_right);
                for k in 0..n {
                    let mut row = d_in.row_mut(k);
                    if k + 1 < n {
                        row += &via_left.row(k + 1);
                    }
                    if k > 0 {
                        row += &via_right.row(k - 1);
                    }
                }
            }
            d_h = d_in;
        }

        let mut d_x = d_h;
        let mut d_q = Array2::<f64>::zeros((m, d));
        if m > 0 {
            let share = &d_q_mean / m as f64;
            for mut row in d_q.rows_mut() {
                row += &share;
            }
        }
        for i in 0..n {
            if d_match[i] == 0.0 {
                continue;
            }
            for k in 0..m {
                let a = cache.attention[[i, k]];
                let c = cache.cos[[i, k]];
                let d_cos = d_match[i] * a * (1.0 + tau * (c - cache.match_feature[i]));
                if d_cos == 0.0 {
                    continue;
                }
                let inv = 1.0 / (cache.x_norm[i] * cache.q_norm[k]);
                let xi = cache.x.row(i);
                let qk = cache.q.row(k);
                let cx = c / (cache.x_norm[i] * cache.x_norm[i]);
                let cq = c / (cache.q_norm[k] * cache.q_norm[k]);
                for f in 0..d {
                    d_x[[i, f]] += d_cos * (qk[f] * inv - cx * xi[f]);
                    d_q[[k, f]] += d_cos * (xi[f] * inv - cq * qk[f]);
                }
            }
        }
        grads.add_embedding_rows(&cache.context_ids, &d_x);
        grads.add_embedding_rows(&cache.query_ids, &d_q);
        grads
    }
}

impl Encoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn encode(&self, input: &EncoderInput) -> Result<ReprMatrix> {
        let cache = self.forward(input)?;
        Ok(ReprMatrix(cache.output().clone()))
    }
}
