//! Encoder, boundary and matching heads, joint loss and gradients.

pub mod checkpoint;
pub mod encoder;
pub mod heads;
pub mod loss;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use encoder::{Encoder, EncoderCache, EncoderInput, ReprMatrix, ToyEncoder, ToyEncoderConfig, Vocab};
pub use heads::{candidate_pairs, match_probability, predict_end, predict_start, HeadParams, ProbOutputs};
pub use loss::{compute_loss, LossBreakdown, LossWeights};

use self::encoder::EncoderGrads;
use self::heads::{match_logit, row_softmax, sigmoid};
use crate::data::{LabelTensors, MrcExample};
use crate::decode::extract_boundary_indexes;
use crate::error::Result;

/// Which start-end pairs the matching head scores.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    /// Predicted starts x predicted ends.
    Inference,
    /// Gold and predicted boundaries combined.
    Training(&'a LabelTensors),
    /// Every `(i, j)` with `i <= j`.
    All,
    /// An explicit pair set, e.g. to freeze it for finite differences.
    Fixed(&'a BTreeSet<(usize, usize)>),
}

/// Toy encoder plus heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcModel {
    pub encoder: ToyEncoder,
    pub heads: HeadParams,
}

/// Forward activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub encoder: EncoderCache,
    pub probs: ProbOutputs,
    pub predicted_starts: BTreeSet<usize>,
    pub predicted_ends: BTreeSet<usize>,
}

impl ForwardState {
    pub fn repr(&self) -> &Array2<f64> {
        self.encoder.output()
    }
}

/// Gradients for every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: EncoderGrads,
    pub heads: HeadParams,
}

impl Gradients {
    pub fn zeros(model: &MrcModel) -> Self {
        Gradients {
            encoder: EncoderGrads::zeros(&model.encoder.config),
            heads: HeadParams::zeros(model.encoder.config.dim),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.encoder.add_assign(&other.encoder);
        self.heads.add_assign(&other.heads);
    }

    /// Dense copies in the order of [`MrcModel::named_tensors`].
    pub fn to_dense(&self, model: &MrcModel) -> Vec<(String, Vec<f64>)> {
        let mut embedding = Array2::<f64>::zeros(model.encoder.embedding.raw_dim());
        for (&id, row) in &self.encoder.embedding {
            embedding.row_mut(id as usize).assign(row);
        }
        let mut out = vec![(
            "embedding".to_string(),
            embedding.as_slice().expect("standard layout").to_vec(),
        )];
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            for (name, values) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), values.to_vec()));
            }
        }
        for (name, values) in self.heads.tensors() {
            out.push((format!("head.{name}"), values.to_vec()));
        }
        out
    }
}

/// A named parameter tensor with its shape.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

impl MrcModel {
    /// Seeded initialization: uniform in `[-1/sqrt(d), 1/sqrt(d)]` for
    /// embeddings, mixing and head weights; zero biases.
    pub fn new(config: ToyEncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ToyEncoder::new(config, vocab, &mut rng)?;
        let heads = HeadParams::random(encoder.config.dim, &mut rng);
        Ok(MrcModel { encoder, heads })
    }

    pub fn dim(&self) -> usize {
        self.encoder.config.dim
    }

    pub fn input_for(example: &MrcExample) -> EncoderInput {
        EncoderInput::new(&example.query_tokens, &example.context_tokens)
    }

    pub fn forward(&self, input: &EncoderInput, candidates: Candidates<'_>) -> Result<ForwardState> {
        let cache = self.encoder.forward(input)?;
        let e = cache.output();
        let p_start = row_softmax(&e.dot(&self.heads.t_start));
        let p_end = row_softmax(&e.dot(&self.heads.t_end));
        let (predicted_starts, predicted_ends) = extract_boundary_indexes(&p_start, &p_end);
        let pairs = match candidates {
            Candidates::Inference => candidate_pairs(None, &predicted_starts, &predicted_ends),
            Candidates::Training(gold) => {
                candidate_pairs(Some(gold), &predicted_starts, &predicted_ends)
            }
            Candidates::All => {
                let n = e.nrows();
                (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
            }
            Candidates::Fixed(pairs) => pairs.clone(),
        };
        let p_match = pairs
            .into_iter()
            .map(|(i, j)| {
                let p = sigmoid(match_logit(e.row(i), e.row(j), &self.heads.match_weights));
                ((i, j), p)
            })
            .collect();
        Ok(ForwardState {
            probs: ProbOutputs {
                p_start,
                p_end,
                p_match,
            },
            encoder: cache,
            predicted_starts,
            predicted_ends,
        })
    }

    /// Representation matrix for `input`.
    pub fn encode(&self, input: &EncoderInput) -> Result<ReprMatrix> {
        self.encoder.encode(input)
    }

    /// Analytic gradients of the weighted joint loss. The encoder receives
    /// the sum of all three head contributions.
    pub fn backward(&self, state: &ForwardState, gold: &LabelTensors, w: &LossWeights) -> Gradients {
        let e = state.repr();
        let (n, d) = e.dim();
        let mut d_e = Array2::<f64>::zeros((n, d));
        let mut grads = Gradients::zeros(self);

        let HeadParams { t_start, t_end, .. } = &mut grads.heads;
        for (probs, labels, weight, t, d_t) in [
            (&state.probs.p_start, &gold.y_start, w.alpha, &self.heads.t_start, t_start),
            (&state.probs.p_end, &gold.y_end, w.beta, &self.heads.t_end, t_end),
        ] {
            if weight == 0.0 || n == 0 {
                continue;
            }
            let mut d_logits = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d_logits[[i, usize::from(y == 1)]] -= 1.0;
            }
            d_logits *= weight / n as f64;
            *d_t += &e.t().dot(&d_logits);
            d_e += &d_logits.dot(&t.t());
        }

        let pairs = &state.probs.p_match;
        if w.gamma != 0.0 && !pairs.is_empty() {
            let scale = w.gamma / pairs.len() as f64;
            let (m_start, m_end) = self.heads.match_weights.view().split_at(Axis(0), d);
            let mut d_m = Array1::<f64>::zeros(2 * d);
            for (&(i, j), &p) in pairs {
                let y = if gold.y_match.contains(&(i, j)) { 1.0 } else { 0.0 };
                let g = scale * (p - y);
                {
                    let (mut dm_start, mut dm_end) = d_m.view_mut().split_at(Axis(0), d);
                    dm_start.scaled_add(g, &e.row(i));
                    dm_end.scaled_add(g, &e.row(j));
                }
                d_e.row_mut(i).scaled_add(g, &m_start);
                d_e.row_mut(j).scaled_add(g, &m_end);
            }
            grads.heads.match_weights += &d_m;
        }

        grads.encoder = self.encoder.backward(&state.encoder, &d_e);
        grads
    }

    /// Forward, loss and gradients for one training example.
    pub fn loss_and_gradients(
        &self,
        example: &MrcExample,
        gold: &LabelTensors,
        w: &LossWeights,
    ) -> Result<(LossBreakdown, Gradients)> {
        let state = self.forward(&Self::input_for(example), Candidates::Training(gold))?;
        let loss = compute_loss(&state.probs, gold, w)?;
        Ok((loss, self.backward(&state, gold, w)))
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (&id, row) in &grads.encoder.embedding {
            self.encoder
                .embedding
                .row_mut(id as usize)
                .scaled_add(-lr, row);
        }
        for (layer, g) in self.encoder.layers.iter_mut().zip(&grads.encoder.layers) {
            layer.w_self.scaled_add(-lr, &g.w_self);
            layer.w_left.scaled_add(-lr, &g.w_left);
            layer.w_right.scaled_add(-lr, &g.w_right);
            layer.w_query.scaled_add(-lr, &g.w_query);
            layer.u_match.scaled_add(-lr, &g.u_match);
            layer.bias.scaled_add(-lr, &g.bias);
        }
        self.heads.t_start.scaled_add(-lr, &grads.heads.t_start);
        self.heads.t_end.scaled_add(-lr, &grads.heads.t_end);
        self.heads
            .match_weights
            .scaled_add(-lr, &grads.heads.match_weights);
    }

    /// All parameters in a fixed order: embedding, layers, heads.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let d = self.dim();
        let mut out = vec![NamedTensor {
            name: "embedding".into(),
            shape: vec![self.encoder.vocab.len(), d],
            values: self.encoder.embedding.as_slice().expect("standard layout"),
        }];
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            for ((name, values), shape) in layer.tensors().into_iter().zip(encoder::MixLayer::shapes(d)) {
                out.push(NamedTensor {
                    name: format!("layer{l}.{name}"),
                    shape,
                    values,
                });
            }
        }
        for ((name, values), shape) in self.heads.tensors().into_iter().zip(HeadParams::shapes(d)) {
            out.push(NamedTensor {
                name: format!("head.{name}"),
                shape,
                values,
            });
        }
        out
    }

    /// Mutable views in the order of [`MrcModel::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![(
            "embedding".into(),
            self.encoder.embedding.as_slice_mut().expect("standard layout"),
        )];
        for (l, layer) in self.encoder.layers.iter_mut().enumerate() {
            for (name, values) in layer.tensors_mut() {
                out.push((format!("layer{l}.{name}"), values));
            }
        }
        for (name, values) in self.heads.tensors_mut() {
            out.push((format!("head.{name}"), values));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|t| t.values.len()).sum()
    }
}
