//! Shortest-path decoding with lexical translation scores.
//!
//! Nodes are visited in topological order. Each node keeps the running sums
//! `s[v, i] = Σ_{z on the best path to v} p_t(x_i | z)`, and an edge `(u, v, z)`
//! is scored as the full path score `-Σ_i ln(p_t(x_i | z) + s[u, i])`. When
//! several paths meet at a node only the winner's sums survive, so the search
//! is exact on trees and approximate on graphs with reconvergent paths.
//!
//! The `</s>` edge contributes nothing to the sums.

use crate::automaton::{ComponentGraph, LabelId, NodeId, EOS_LABEL};
use crate::error::{Error, Result};
use crate::model1::TranslationTable;
use crate::search::{
    ConstrainedDecodeRequest, ScoredPath, SearchOutcome, SearchStart, SearchStats, SuffixSearch,
    Translation,
};

#[derive(Clone, Debug)]
pub struct LexicalOptions {
    /// Start the running sums at `p_t(x_i | NULL)` instead of 0.
    pub null_init: bool,
    /// Score stored at the start node.
    pub initial_score: f64,
}

impl Default for LexicalOptions {
    fn default() -> Self {
        LexicalOptions { null_init: true, initial_score: 0.0 }
    }
}

/// Lexical scorer prepared for one input sentence.
pub struct LexicalQuery<'a> {
    graph: &'a ComponentGraph,
    start: SearchStart,
    n: usize,
    /// `p_t(x_i | label)` laid out label-major.
    probs: Vec<f64>,
    init: Vec<f64>,
    initial_score: f64,
}

impl<'a> LexicalQuery<'a> {
    pub fn new(
        graph: &'a ComponentGraph,
        table: &TranslationTable,
        x: &[String],
        start: SearchStart,
        options: &LexicalOptions,
    ) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidInput("empty input".into()));
        }
        if start.node as usize >= graph.node_count() {
            return Err(Error::InvalidInput(format!("start node {} is not in the graph", start.node)));
        }
        let n = x.len();
        let mut probs = vec![0.0; graph.labels().len() * n];
        for (l, label) in graph.labels().iter().enumerate() {
            if l as LabelId == EOS_LABEL {
                continue;
            }
            for (i, xi) in x.iter().enumerate() {
                probs[l * n + i] = table.lookup(xi, label);
            }
        }
        let init = x
            .iter()
            .map(|xi| if options.null_init { table.null_prob(xi) } else { 0.0 })
            .collect();
        Ok(LexicalQuery {
            graph,
            start,
            n,
            probs,
            init,
            initial_score: options.initial_score,
        })
    }

    fn label_probs(&self, label: LabelId) -> &[f64] {
        let l = label as usize;
        &self.probs[l * self.n..(l + 1) * self.n]
    }

    fn path_score(sums: &[f64]) -> f64 {
        -sums.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Running sums after following `labels` from the start.
    fn sums_along(&self, labels: &[LabelId]) -> Vec<f64> {
        let mut sums = self.init.clone();
        for &l in labels {
            for (s, p) in sums.iter_mut().zip(self.label_probs(l)) {
                *s += p;
            }
        }
        sums
    }
}

impl SuffixSearch for LexicalQuery<'_> {
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
        let n = self.n;
        let mut stats = SearchStats::default();

        let mut d = vec![f64::INFINITY; nv];
        let mut back: Vec<Option<(NodeId, LabelId)>> = vec![None; nv];
        let mut s = vec![0.0; nv * n];
        let spur_sums = self.sums_along(&request.forced_prefix);
        d[spur as usize] = if request.forced_prefix.is_empty() {
            self.initial_score
        } else {
            Self::path_score(&spur_sums)
        };
        s[spur as usize * n..(spur as usize + 1) * n].copy_from_slice(&spur_sums);

        let mut scratch = vec![0.0; n];
        for u in spur as usize..nv {
            if d[u].is_infinite() {
                continue;
            }
            stats.nodes_visited += 1;
            for e in g.out_edges(u as NodeId) {
                stats.edges_examined += 1;
                if u == spur as usize && request.banned.contains(&e.label) {
                    continue;
                }
                let su = &s[u * n..(u + 1) * n];
                for ((t, &p), &acc) in scratch.iter_mut().zip(self.label_probs(e.label)).zip(su) {
                    *t = p + acc;
                }
                let score = Self::path_score(&scratch);
                let v = e.target as usize;
                let better = score < d[v]
                    || (score == d[v] && back[v].is_some_and(|(_, l)| e.label < l));
                if better {
                    d[v] = score;
                    back[v] = Some((u as NodeId, e.label));
                    s[v * n..(v + 1) * n].copy_from_slice(&scratch);
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
        Ok(Self::path_score(&self.sums_along(labels)))
    }
}

/// Decodes `x` from `start` and returns the best well-formed output.
pub fn decode_lexical(
    x: &[String],
    graph: &ComponentGraph,
    table: &TranslationTable,
    start: &SearchStart,
    options: &LexicalOptions,
) -> Result<Translation> {
    let query = LexicalQuery::new(graph, table, x, start.clone(), options)?;
    let path = query.best()?;
    Ok(Translation::from_path(graph, start, &path))
}

/// `-Σ_j ln Σ_{z in labels} p_t(x_j | z)`, with the NULL term when `null_init` is set.
/// The objective the lexical search approximately minimizes.
pub fn score_path<S: AsRef<str>>(x: &[String], labels: &[S], table: &TranslationTable, null_init: bool) -> f64 {
    -x.iter()
        .map(|xi| {
            let init = if null_init { table.null_prob(xi) } else { 0.0 };
            labels
                .iter()
                .fold(init, |acc, z| acc + table.lookup(xi, z.as_ref()))
                .ln()
        })
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::build_graph;
    use crate::corpus::{Pair, ParallelCorpus};
    use crate::model1::{train_model1, Model1Options};
    use crate::par::Execution;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn table(pairs: &[(&str, &str)], null: bool) -> TranslationTable {
        let c = ParallelCorpus::from_pairs(
            pairs
                .iter()
                .map(|(x, z)| Pair::new(toks(x), toks(z), None).unwrap())
                .collect(),
        );
        let opts = Model1Options { iterations: 5, null, ..Default::default() };
        train_model1(&c, &opts, Execution::Sequential).unwrap().0
    }

    #[test]
    fn single_path_graph() {
        let g = build_graph(&[toks("numeric math ceil arg")]).unwrap();
        let t = table(&[("a", "numeric")], true);
        let out = decode_lexical(&toks("anything at all"), &g, &t, &SearchStart::source(&g), &Default::default()).unwrap();
        assert_eq!(out.labels, toks("numeric math ceil arg"));
    }

    #[test]
    fn ceiling_goes_to_ceil() {
        let g = build_graph(&[
            toks("2C numeric math ceil arg"),
            toks("2C numeric math floor arg"),
            toks("2Clojure algo math ceil x"),
        ])
        .unwrap();
        let t = table(
            &[
                ("the ceiling of a number", "numeric math ceil arg"),
                ("the floor of a number", "numeric math floor arg"),
                ("ceiling", "ceil"),
                ("floor", "floor"),
            ],
            true,
        );
        let start = SearchStart::for_language(&g, Some("2C")).unwrap();
        let out = decode_lexical(&toks("the ceiling of a number"), &g, &t, &start, &Default::default()).unwrap();
        assert_eq!(out.labels, toks("2C numeric math ceil arg"));
        assert_eq!(out.component(), toks("numeric math ceil arg"));
        assert_eq!(out.language.as_deref(), Some("C"));
        assert!(g.accepts(&out.labels));
    }

    #[test]
    fn reported_score_matches_score_path() {
        let g = build_graph(&[toks("a b"), toks("a c"), toks("d b"), toks("d c")]).unwrap();
        let t = table(&[("x y", "a b"), ("y", "c"), ("x", "d")], true);
        for null_init in [true, false] {
            let opts = LexicalOptions { null_init, ..Default::default() };
            let x = toks("x y");
            let out = decode_lexical(&x, &g, &t, &SearchStart::source(&g), &opts).unwrap();
            assert_eq!(out.score, score_path(&x, &out.labels, &t, null_init));
        }
    }

    #[test]
    fn score_of_certain_single_label_is_zero() {
        let t = table(&[("a", "b")], false);
        assert_eq!(score_path(&toks("a"), &toks("b"), &t, false), 0.0);
    }

    #[test]
    fn banned_edges_and_forced_prefix() {
        let g = build_graph(&[toks("a b"), toks("a c"), toks("d")]).unwrap();
        let t = table(&[("x", "a b")], false);
        let q = LexicalQuery::new(&g, &t, &toks("x"), SearchStart::source(&g), &Default::default()).unwrap();
        let a = g.label_id("a").unwrap();
        let b = g.label_id("b").unwrap();
        let req = ConstrainedDecodeRequest { forced_prefix: vec![a], banned: vec![b] };
        let out = q.search(&req).unwrap().path.unwrap();
        assert_eq!(out.body(), [a, g.label_id("c").unwrap()]);
        assert_eq!(out.score, q.rescore(&out.labels).unwrap());
        let all_banned = ConstrainedDecodeRequest { forced_prefix: vec![], banned: vec![a, g.label_id("d").unwrap()] };
        assert!(q.search(&all_banned).unwrap().path.is_none());
    }

    #[test]
    fn visits_are_linear() {
        let seqs: Vec<Vec<String>> = (0..50).map(|i| toks(&format!("p{} q{} r{}", i % 5, i % 7, i))).collect();
        let g = build_graph(&seqs).unwrap();
        let t = table(&[("x", "p1 q1")], true);
        let q = LexicalQuery::new(&g, &t, &toks("x"), SearchStart::source(&g), &Default::default()).unwrap();
        let out = q.search(&Default::default()).unwrap();
        assert!(out.stats.nodes_visited <= g.node_count());
        assert_eq!(out.stats.edges_examined, g.edge_count());
    }

    #[test]
    fn errors() {
        let g = build_graph(&[toks("a")]).unwrap();
        let t = table(&[("x", "a")], true);
        assert!(decode_lexical(&[], &g, &t, &SearchStart::source(&g), &Default::default()).is_err());
        let bad = SearchStart { node: 99, context: vec![] };
        assert!(decode_lexical(&toks("x"), &g, &t, &bad, &Default::default()).is_err());
    }
}
