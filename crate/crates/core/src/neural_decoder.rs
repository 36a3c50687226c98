//! Beam-limited shortest-path decoding with the neural scorer.
//!
//! Nodes are visited in topological order. Each reached node stores one
//! decoder state, the one left by its best incoming path. At a node the
//! decoder is stepped once, the full output distribution is read off at the
//! outgoing labels, and only the `beam` most probable edges are relaxed with
//! `d[u] - ln p(z)`. When a better path later reaches an already reached node,
//! its stored state is replaced; these replacements are counted as clobbers.

use crate::automaton::{ComponentGraph, LabelId, NodeId};
use crate::error::{Error, Result};
use crate::model1::TranslationTable;
use crate::neural::{DecoderStepState, NeuralParameters, NeuralScorer, Prediction};
use crate::search::{
    ConstrainedDecodeRequest, ScoredPath, SearchOutcome, SearchStart, SearchStats, SuffixSearch,
    Translation,
};

pub const DEFAULT_BEAM: usize = 5;

/// Probabilities of the outgoing labels of `u` under `prediction`, in edge
/// order. Not renormalized over the adjacency. The count is the number of
/// labels outside the target vocabulary.
pub fn normalize_over_adjacency(
    scorer: &NeuralScorer<'_>,
    prediction: &Prediction,
    u: NodeId,
    graph: &ComponentGraph,
) -> (Vec<(LabelId, f64)>, usize) {
    let mut unknown = 0;
    let probs = graph
        .out_edges(u)
        .iter()
        .map(|e| {
            let (p, oov) = scorer.emission(prediction, graph.label(e.label));
            unknown += oov as usize;
            (e.label, p)
        })
        .collect();
    (probs, unknown)
}

/// The `beam` most probable entries, ties broken by label.
pub fn top_edges(mut scored: Vec<(LabelId, f64)>, beam: usize) -> Vec<(LabelId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(beam);
    scored
}

/// Neural scorer prepared for one input sentence.
pub struct NeuralQuery<'a> {
    graph: &'a ComponentGraph,
    scorer: NeuralScorer<'a>,
    start: SearchStart,
    start_state: DecoderStepState,
    beam: usize,
}

impl<'a> NeuralQuery<'a> {
    pub fn new(
        graph: &'a ComponentGraph,
        params: &'a NeuralParameters,
        inverse: Option<&TranslationTable>,
        x: &[String],
        start: SearchStart,
        beam: usize,
    ) -> Result<Self> {
        if beam == 0 {
            return Err(Error::InvalidInput("beam must be at least 1".into()));
        }
        if start.node as usize >= graph.node_count() {
            return Err(Error::InvalidInput(format!("start node {} is not in the graph", start.node)));
        }
        let scorer = NeuralScorer::new(params, x, inverse)?;
        let context: Vec<&str> = start.context.iter().map(|&l| graph.label(l)).collect();
        let start_state = scorer.force(&scorer.initial_state(), &context);
        Ok(NeuralQuery { graph, scorer, start, start_state, beam })
    }

    pub fn scorer(&self) -> &NeuralScorer<'a> {
        &self.scorer
    }

    /// Decoder state after the start context has been fed.
    pub fn start_state(&self) -> &DecoderStepState {
        &self.start_state
    }

    pub fn beam(&self) -> usize {
        self.beam
    }
}

impl SuffixSearch for NeuralQuery<'_> {
    fn graph(&self) -> &ComponentGraph {
        self.graph
    }

    fn start(&self) -> &SearchStart {
        &self.start
    }

    fn search(&self, request: &ConstrainedDecodeRequest) -> Result<SearchOutcome> {
        let g = self.graph;
        let spur = g
            .walk(self.start.node, &request.forced_prefix)
            .ok_or_else(|| Error::InvalidInput("forced prefix is not a path".into()))?;
        let nv = g.node_count();
        let mut stats = SearchStats::default();

        let mut d = vec![f64::INFINITY; nv];
        let mut back: Vec<Option<(NodeId, LabelId)>> = vec![None; nv];
        let mut states: Vec<Option<DecoderStepState>> = vec![None; nv];

        let mut state = self.start_state.clone();
        let mut prefix_score = 0.0;
        for &l in &request.forced_prefix {
            let pred = self.scorer.predict(&state);
            prefix_score -= self.scorer.emission(&pred, g.label(l)).0.ln();
            state = self.scorer.advance(&pred, g.label(l));
        }
        d[spur as usize] = prefix_score;
        states[spur as usize] = Some(state);

        for u in spur as usize..nv {
            if d[u].is_infinite() {
                continue;
            }
            let Some(su) = states[u].take() else { continue };
            if g.out_edges(u as NodeId).is_empty() {
                continue;
            }
            stats.nodes_visited += 1;
            let pred = self.scorer.predict(&su);
            let (mut scored, unknown) = normalize_over_adjacency(&self.scorer, &pred, u as NodeId, g);
            stats.unknown_labels += unknown;
            stats.edges_examined += scored.len();
            if u == spur as usize {
                scored.retain(|(l, _)| !request.banned.contains(l));
            }
            let available = scored.len();
            let kept = top_edges(scored, self.beam);
            stats.edges_pruned += available - kept.len();
            for (label, p) in kept {
                let v = g.step(u as NodeId, label).expect("label taken from the adjacency") as usize;
                let score = d[u] - p.ln();
                let better = score < d[v]
                    || (score == d[v] && back[v].is_some_and(|(_, l)| label < l));
                if better {
                    if states[v].is_some() {
                        stats.state_clobbers += 1;
                    }
                    d[v] = score;
                    back[v] = Some((u as NodeId, label));
                    states[v] = Some(self.scorer.advance(&pred, g.label(label)));
                }
            }
        }

        let sink = g.sink() as usize;
        if d[sink].is_infinite() {
            return Ok(SearchOutcome { path: None, stats });
        }
        let mut suffix = Vec::new();
        let mut v = sink as NodeId;
        while v != spur {
            let (u, l) = back[v as usize].expect("finite nodes chain back to the spur");
            suffix.push(l);
            v = u;
        }
        suffix.reverse();
        let mut labels = request.forced_prefix.clone();
        labels.extend(suffix);
        Ok(SearchOutcome {
            path: Some(ScoredPath { labels, score: d[sink] }),
            stats,
        })
    }

    fn rescore(&self, labels: &[LabelId]) -> Result<f64> {
        let tokens: Vec<&str> = labels.iter().map(|&l| self.graph.label(l)).collect();
        Ok(self.scorer.score(&self.start_state, &tokens))
    }

    fn best(&self) -> Result<ScoredPath> {
        self.search(&ConstrainedDecodeRequest::default())?
            .path
            .ok_or_else(|| {
                Error::Search(format!(
                    "beam {} pruned every path to the sink; a beam of {} or more always succeeds",
                    self.beam,
                    self.graph.max_out_degree()
                ))
            })
    }
}

/// Decodes `x` from `start` with beam `beam`.
pub fn decode_neural(
    x: &[String],
    graph: &ComponentGraph,
    params: &NeuralParameters,
    inverse: Option<&TranslationTable>,
    beam: usize,
    start: &SearchStart,
) -> Result<Translation> {
    let query = NeuralQuery::new(graph, params, inverse, x, start.clone(), beam)?;
    let path = query.best()?;
    Ok(Translation::from_path(graph, start, &path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::{build_graph, EOS};
    use crate::corpus::{Pair, ParallelCorpus};
    use crate::neural::NeuralConfig;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn setup() -> (ComponentGraph, NeuralParameters) {
        let seqs = [toks("max a b"), toks("min a b"), toks("abs a"), toks("max a")];
        let corpus = ParallelCorpus::from_pairs(
            seqs.iter()
                .map(|s| Pair::new(toks("some words"), s.clone(), None).unwrap())
                .collect(),
        );
        let cfg = NeuralConfig { embedding: 4, hidden: 4, attention: 4, mlp: 4, init_scale: 3.0, seed: 7, ..Default::default() };
        (build_graph(&seqs).unwrap(), NeuralParameters::new(cfg, &corpus).unwrap())
    }

    #[test]
    fn single_path_scores_sum_of_steps() {
        let (_, p) = setup();
        let g = build_graph(&[toks("max a b")]).unwrap();
        let x = toks("words");
        let out = decode_neural(&x, &g, &p, None, 1, &SearchStart::source(&g)).unwrap();
        assert_eq!(out.labels, toks("max a b"));
        let s = NeuralScorer::new(&p, &x, None).unwrap();
        let want = s.score(&s.initial_state(), &["max", "a", "b", EOS]);
        assert_eq!(out.score, want);
    }

    #[test]
    fn outputs_are_accepted_and_rescored_exactly() {
        let (g, p) = setup();
        for beam in 1..=3 {
            let q = NeuralQuery::new(&g, &p, None, &toks("some other words"), SearchStart::source(&g), beam).unwrap();
            let best = q.best().unwrap();
            let labels: Vec<&str> = best.body().iter().map(|&l| g.label(l)).collect();
            assert!(g.accepts(&labels));
            assert_eq!(best.score, q.rescore(&best.labels).unwrap());
        }
    }

    #[test]
    fn uniform_distribution_keeps_smallest_labels() {
        let scored = vec![(4, 0.25), (2, 0.25), (3, 0.25), (1, 0.25)];
        assert_eq!(top_edges(scored, 2), [(1, 0.25), (2, 0.25)]);
    }

    #[test]
    fn unknown_labels_are_counted() {
        let (_, p) = setup();
        let g = build_graph(&[toks("never seen"), toks("max")]).unwrap();
        let q = NeuralQuery::new(&g, &p, None, &toks("w"), SearchStart::source(&g), 5).unwrap();
        let out = q.search(&Default::default()).unwrap();
        assert!(out.stats.unknown_labels >= 2);
        assert!(out.path.is_some());
    }

    #[test]
    fn zero_beam_is_rejected() {
        let (g, p) = setup();
        assert!(NeuralQuery::new(&g, &p, None, &toks("w"), SearchStart::source(&g), 0).is_err());
    }
}
