//! Random small model instances shared by the gradient tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use mrc_ner::data::{label_tensors_for, LabelTensors, MrcExample};
use mrc_ner::model::{compute_loss, Candidates, LossWeights, MrcModel, ToyEncoderConfig, Vocab};
use mrc_ner::span::EntityType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Random small instance: model, example, gold, weights and a frozen
/// candidate set (gold plus a few random pairs).
pub struct Instance {
    pub model: MrcModel,
    pub example: MrcExample,
    pub gold: LabelTensors,
    pub weights: LossWeights,
    pub pairs: BTreeSet<(usize, usize)>,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=6);
    let d = rng.gen_range(1..=8);
    let layers = rng.gen_range(1..=2);
    let words: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::new(&words);
    let config = ToyEncoderConfig {
        dim: d,
        layers,
        temperature: rng.gen_range(0.5..6.0),
        max_len: 64,
    };
    let mut model = MrcModel::new(config, vocab, rng.gen()).unwrap();
    // push weights away from the tiny-init regime so every term matters
    for (_, values) in model.tensors_mut() {
        for v in values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let m = rng.gen_range(1..=3);
    // overlap query and context vocab so the match feature is exercised;
    // occasionally use an out-of-vocabulary token
    let pick = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.1) {
            "oov".to_string()
        } else {
            words[rng.gen_range(0..words.len())].clone()
        }
    };
    let query_tokens: Vec<String> = (0..m).map(|_| pick(&mut rng)).collect();
    let context_tokens: Vec<String> = (0..n).map(|_| pick(&mut rng)).collect();
    let mut answers = BTreeSet::new();
    for _ in 0..rng.gen_range(0..=3) {
        let s = rng.gen_range(0..n);
        let e = rng.gen_range(s..n);
        answers.insert((s, e));
    }
    let answers: Vec<(usize, usize)> = answers.into_iter().collect();
    let gold = label_tensors_for(n, &answers);
    let mut pairs: BTreeSet<(usize, usize)> = gold.y_match.clone();
    for _ in 0..rng.gen_range(0..=4) {
        let s = rng.gen_range(0..n);
        pairs.insert((s, rng.gen_range(s..n)));
    }
    let weights = LossWeights::new(
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..=1.0),
    )
    .unwrap();
    Instance {
        model,
        example: MrcExample {
            sentence_id: format!("g{seed}"),
            entity_type: EntityType {
                name: "T".into(),
                index: 0,
            },
            query_text: query_tokens.join(" "),
            query_tokens,
            context_tokens,
            answers,
        },
        gold,
        weights,
        pairs,
    }
}

pub fn loss_at(inst: &Instance, model: &MrcModel) -> f64 {
    let state = model
        .forward(&MrcModel::input_for(&inst.example), Candidates::Fixed(&inst.pairs))
        .unwrap();
    compute_loss(&state.probs, &inst.gold, &inst.weights).unwrap().total
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter, with the usual floor on the denominator.
pub fn max_relative_error(inst: &Instance) -> (f64, String) {
    let state = inst
        .model
        .forward(&MrcModel::input_for(&inst.example), Candidates::Fixed(&inst.pairs))
        .unwrap();
    let analytic = inst.model.backward(&state, &inst.gold, &inst.weights).to_dense(&inst.model);

    let mut probe = inst.model.clone();
    let mut worst = (0.0, String::new());
    let sizes: Vec<(String, usize)> = probe
        .tensors_mut()
        .into_iter()
        .map(|(name, v)| (name, v.len()))
        .collect();
    for (t, (name, len)) in sizes.iter().enumerate() {
        assert_eq!(analytic[t].0, *name);
        for k in 0..*len {
            let original = probe.tensors_mut()[t].1[k];
            probe.tensors_mut()[t].1[k] = original + STEP;
            let plus = loss_at(inst, &probe);
            probe.tensors_mut()[t].1[k] = original - STEP;
            let minus = loss_at(inst, &probe);
            probe.tensors_mut()[t].1[k] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let exact = analytic[t].1[k];
            let err = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-3);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}]: analytic {exact:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}
