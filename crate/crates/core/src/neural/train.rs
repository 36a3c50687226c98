//! Stochastic gradient descent on the summed token negative log-likelihood.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::exec::ConstMatrix;
use super::model::{bias_matrix, loss_and_gradient, sequence_loss, NeuralScorer};
use super::{Gradients, NeuralParameters};
use crate::automaton::EOS;
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model1::TranslationTable;
use crate::par::Execution;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Gradient-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    /// Pairs per update. Gradients within a batch are averaged.
    pub batch_size: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            learning_rate: 0.1,
            clip: Some(5.0),
            batch_size: 1,
            seed: 1,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-pair loss of each epoch, measured before each update.
    pub losses: Vec<f64>,
}

struct Example {
    x: Vec<String>,
    target: Vec<String>,
    bias: Option<ConstMatrix>,
}

fn examples(params: &NeuralParameters, corpus: &ParallelCorpus, inverse: Option<&TranslationTable>) -> Result<Vec<Example>> {
    corpus
        .pairs
        .iter()
        .map(|p| {
            let bias = match (params.config.bias, inverse) {
                (true, Some(t)) => Some(bias_matrix(params, &p.source, t)?),
                (true, None) => return Err(Error::InvalidInput("model uses the lexical bias; an inverse table is required".into())),
                (false, _) => None,
            };
            Ok(Example { x: p.source.clone(), target: p.target.clone(), bias })
        })
        .collect()
}

/// Trains in place. Equal seeds give bit-identical parameters and losses
/// under either execution policy.
pub fn train(
    params: &mut NeuralParameters,
    corpus: &ParallelCorpus,
    inverse: Option<&TranslationTable>,
    options: &TrainOptions,
) -> Result<TrainReport> {
    if options.epochs == 0 {
        return Err(Error::InvalidInput("epochs must be at least 1".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty corpus".into()));
    }
    if options.learning_rate.is_nan() || options.learning_rate < 0.0 {
        return Err(Error::InvalidInput("learning rate must be non-negative".into()));
    }
    let data = examples(params, corpus, inverse)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(options.batch_size) {
            let snapshot: &NeuralParameters = params;
            let results = options.exec.map(batch, |&i| {
                let ex = &data[i];
                loss_and_gradient(snapshot, &ex.x, &ex.target, ex.bias.as_ref())
            });
            let mut grad = Gradients::zeros(params);
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss: *loss });
                }
                total += loss;
                grad.add_assign(g);
            }
            grad.scale(1.0 / batch.len() as f64);
            if let Some(clip) = options.clip {
                let norm = grad.norm();
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            for (t, g) in params.tensors.iter_mut().zip(&grad.tensors) {
                for (w, d) in t.data.iter_mut().zip(g) {
                    *w -= options.learning_rate * d;
                }
            }
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
        }
        report.losses.push(total / data.len() as f64);
    }
    Ok(report)
}

/// Mean per-pair loss without updating anything.
pub fn corpus_loss(
    params: &NeuralParameters,
    corpus: &ParallelCorpus,
    inverse: Option<&TranslationTable>,
    exec: Execution,
) -> Result<f64> {
    let data = examples(params, corpus, inverse)?;
    let losses = exec.map(&data, |ex| sequence_loss(params, &ex.x, &ex.target, ex.bias.as_ref()));
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Unconstrained greedy decoding over the target vocabulary and the input
/// tokens (when copying is enabled). Stops at `</s>` or after `max_len` tokens.
pub fn greedy_unconstrained(scorer: &NeuralScorer<'_>, x: &[String], max_len: usize) -> Vec<String> {
    let params = scorer.params();
    let mut candidates: Vec<&str> = params.target_vocab.tokens().iter().map(String::as_str).collect();
    if params.config.copy {
        candidates.extend(x.iter().map(String::as_str));
    }
    candidates.sort_unstable();
    candidates.dedup();

    let mut state = scorer.initial_state();
    let mut out = Vec::new();
    while out.len() < max_len {
        let pred = scorer.predict(&state);
        let mut best = ("", f64::NEG_INFINITY);
        for &c in &candidates {
            let p = scorer.emission(&pred, c).0;
            if p > best.1 {
                best = (c, p);
            }
        }
        if best.0 == EOS {
            break;
        }
        out.push(best.0.to_owned());
        state = scorer.advance(&pred, best.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Pair;
    use crate::neural::NeuralConfig;

    fn corpus() -> ParallelCorpus {
        let t = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        ParallelCorpus::from_pairs(vec![
            Pair::new(t("largest of two"), t("max a b"), None).unwrap(),
            Pair::new(t("smallest of two"), t("min a b"), None).unwrap(),
            Pair::new(t("absolute value"), t("abs a"), None).unwrap(),
        ])
    }

    fn small() -> NeuralConfig {
        NeuralConfig { embedding: 8, hidden: 8, attention: 8, mlp: 8, ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let c = corpus();
        let mut p = NeuralParameters::new(small(), &c).unwrap();
        let before = p.clone();
        let opts = TrainOptions { epochs: 3, learning_rate: 0.0, ..Default::default() };
        let r = train(&mut p, &c, None, &opts).unwrap();
        assert_eq!(p, before);
        assert!(r.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn seeded_runs_match_across_policies() {
        let c = corpus();
        let run = |exec| {
            let mut p = NeuralParameters::new(small(), &c).unwrap();
            let opts = TrainOptions { epochs: 5, batch_size: 2, exec, ..Default::default() };
            let r = train(&mut p, &c, None, &opts).unwrap();
            (p, r)
        };
        let (pa, ra) = run(Execution::Sequential);
        let (pb, rb) = run(Execution::Parallel);
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn loss_falls_and_pairs_are_learned() {
        let c = corpus();
        let mut p = NeuralParameters::new(small(), &c).unwrap();
        let opts = TrainOptions { epochs: 100, ..Default::default() };
        let r = train(&mut p, &c, None, &opts).unwrap();
        assert!(r.losses.last().unwrap() < &(r.losses[0] * 0.2));
        for pair in &c.pairs {
            let s = NeuralScorer::new(&p, &pair.source, None).unwrap();
            assert_eq!(greedy_unconstrained(&s, &pair.source, 10), pair.target);
        }
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let c = corpus();
        let mut p = NeuralParameters::new(small(), &c).unwrap();
        let opts = TrainOptions { epochs: 50, learning_rate: 1e300, clip: None, ..Default::default() };
        match train(&mut p, &c, None, &opts) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
