//! Ranked path lists by Yen's deviation method over any [`SuffixSearch`].

use std::collections::HashSet;

use crate::automaton::{ComponentGraph, Edge, LabelId, NodeId};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::search::{
    ConstrainedDecodeRequest, ScoredPath, SearchOutcome, SearchStart, SearchStats, SuffixSearch,
    Translation,
};

#[derive(Clone, Debug, PartialEq)]
pub struct KBestList {
    /// Ascending by score.
    pub items: Vec<Translation>,
    pub paths: Vec<ScoredPath>,
    pub k_requested: usize,
    /// Counters summed over every search run.
    pub stats: SearchStats,
}

impl KBestList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn path_order(a: &ScoredPath, b: &ScoredPath) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then_with(|| a.labels.cmp(&b.labels))
}

/// Up to `k` distinct paths from the query's start, best first.
///
/// Each round deviates from the most recently accepted path at every
/// position: the prefix before the position is forced, and every label that
/// an accepted path with the same prefix took there is banned. Spur searches
/// of one round run under `exec` and are pooled in position order.
pub fn decode_k(query: &dyn SuffixSearch, k: usize, exec: Execution) -> Result<KBestList> {
    decode_k_with_prefix(query, &[], k, exec)
}

/// Like [`decode_k`], restricted to paths that begin with `prefix`.
pub fn decode_k_with_prefix(
    query: &dyn SuffixSearch,
    prefix: &[LabelId],
    k: usize,
    exec: Execution,
) -> Result<KBestList> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let graph = query.graph();
    let mut stats = SearchStats::default();
    let first = query.search(&ConstrainedDecodeRequest { forced_prefix: prefix.to_vec(), banned: Vec::new() })?;
    stats.add(&first.stats);
    let mut accepted: Vec<ScoredPath> = first.path.into_iter().collect();
    let mut seen: HashSet<Vec<LabelId>> = accepted.iter().map(|p| p.labels.clone()).collect();
    let mut pool: Vec<ScoredPath> = Vec::new();

    while accepted.len() < k && !accepted.is_empty() {
        let last = accepted.last().expect("non-empty").labels.clone();
        let requests: Vec<ConstrainedDecodeRequest> = (prefix.len()..last.len())
            .map(|j| {
                let root = &last[..j];
                let mut banned: Vec<LabelId> = accepted
                    .iter()
                    .filter(|p| p.labels.len() > j && p.labels[..j] == *root)
                    .map(|p| p.labels[j])
                    .collect();
                banned.sort_unstable();
                banned.dedup();
                ConstrainedDecodeRequest { forced_prefix: root.to_vec(), banned }
            })
            .collect();
        let outcomes: Vec<Result<SearchOutcome>> = exec.map(&requests, |r| query.search(r));
        for outcome in outcomes {
            let outcome = outcome?;
            stats.add(&outcome.stats);
            if let Some(path) = outcome.path {
                if seen.insert(path.labels.clone()) {
                    pool.push(path);
                }
            }
        }
        let Some(best) = pool
            .iter()
            .enumerate()
            .min_by(|a, b| path_order(a.1, b.1))
            .map(|(i, _)| i)
        else {
            break;
        };
        accepted.push(pool.swap_remove(best));
    }

    // Approximate searches can surface a cheaper path late; keep the list sorted.
    accepted.sort_by(path_order);
    let start = query.start();
    let items = accepted
        .iter()
        .map(|p| Translation::from_path(graph, start, p))
        .collect();
    Ok(KBestList { items, paths: accepted, k_requested: k, stats })
}

/// A k-best list from every language start of `graph`, in label order.
/// `make` prepares a scorer for one start.
pub fn kbest_per_language<'g, F>(
    graph: &'g ComponentGraph,
    k: usize,
    exec: Execution,
    make: F,
) -> Result<Vec<(String, KBestList)>>
where
    F: Fn(SearchStart) -> Result<Box<dyn SuffixSearch + 'g>>,
{
    let tokens = graph.language_tokens();
    if tokens.is_empty() {
        return Err(Error::InvalidInput("graph has no language tokens".into()));
    }
    tokens
        .into_iter()
        .map(|t| {
            let query = make(SearchStart::for_language(graph, Some(t))?)?;
            let list = decode_k(query.as_ref(), k, exec)?;
            let name = crate::corpus::language_of_token(t).unwrap_or(t).to_owned();
            Ok((name, list))
        })
        .collect()
}

/// Exact shortest paths under fixed additive edge weights.
pub struct StaticWeights<'a> {
    graph: &'a ComponentGraph,
    start: SearchStart,
    /// Aligned with `graph.out_edges(u)`.
    weights: Vec<Vec<f64>>,
}

impl<'a> StaticWeights<'a> {
    pub fn new(graph: &'a ComponentGraph, start: SearchStart, weight: impl Fn(NodeId, &Edge) -> f64) -> Self {
        let weights = (0..graph.node_count() as NodeId)
            .map(|u| graph.out_edges(u).iter().map(|e| weight(u, e)).collect())
            .collect();
        StaticWeights { graph, start, weights }
    }

    fn weight(&self, u: NodeId, label: LabelId) -> f64 {
        let edges = self.graph.out_edges(u);
        let i = edges.binary_search_by_key(&label, |e| e.label).expect("edge exists");
        self.weights[u as usize][i]
    }
}

impl SuffixSearch for StaticWeights<'_> {
    fn graph(&self) -> &ComponentGraph {
        self.graph
    }

    fn start(&self) -> &SearchStart {
        &self.start
    }

    fn search(&self, request: &ConstrainedDecodeRequest) -> Result<SearchOutcome> {
        let g = self.graph;
        let mut u = self.start.node;
        let mut prefix_score = 0.0;
        for &l in &request.forced_prefix {
            prefix_score += self.weight(u, l);
            u = g.step(u, l).ok_or_else(|| Error::InvalidInput("forced prefix is not a path".into()))?;
        }
        let spur = u;
        let nv = g.node_count();
        let mut stats = SearchStats::default();
        let mut d = vec![f64::INFINITY; nv];
        let mut back: Vec<Option<(NodeId, LabelId)>> = vec![None; nv];
        d[spur as usize] = prefix_score;
        for u in spur as usize..nv {
            if d[u].is_infinite() {
                continue;
            }
            stats.nodes_visited += 1;
            for (e, w) in g.out_edges(u as NodeId).iter().zip(&self.weights[u]) {
                stats.edges_examined += 1;
                if u == spur as usize && request.banned.contains(&e.label) {
                    continue;
                }
                let v = e.target as usize;
                let score = d[u] + w;
                if score < d[v] || (score == d[v] && back[v].is_some_and(|(_, l)| e.label < l)) {
                    d[v] = score;
                    back[v] = Some((u as NodeId, e.label));
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
        Ok(SearchOutcome { path: Some(ScoredPath { labels, score: d[sink] }), stats })
    }

    fn rescore(&self, labels: &[LabelId]) -> Result<f64> {
        let mut u = self.start.node;
        let mut total = 0.0;
        for &l in labels {
            total += self.weight(u, l);
            u = self
                .graph
                .step(u, l)
                .ok_or_else(|| Error::InvalidInput("labels are not a path".into()))?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::build_graph;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn graph() -> ComponentGraph {
        build_graph(&[toks("a b"), toks("a c"), toks("d b"), toks("d c"), toks("e")]).unwrap()
    }

    fn weights(g: &ComponentGraph) -> StaticWeights<'_> {
        StaticWeights::new(g, SearchStart::source(g), |u, e| ((u as f64 + 1.0) * 0.37 + e.label as f64 * 1.3) % 2.0)
    }

    #[test]
    fn full_enumeration_matches_sorted_brute_force() {
        let g = graph();
        let q = weights(&g);
        let list = decode_k(&q, 100, Execution::Sequential).unwrap();
        let mut brute: Vec<(f64, Vec<String>)> = g
            .enumerate_paths(100)
            .into_iter()
            .map(|p| {
                let mut ids: Vec<LabelId> = p.iter().map(|l| g.label_id(l).unwrap()).collect();
                ids.push(crate::automaton::EOS_LABEL);
                (q.rescore(&ids).unwrap(), p)
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(list.len(), 5);
        for (item, (score, labels)) in list.items.iter().zip(&brute) {
            assert_eq!(&item.labels, labels);
            assert!((item.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn k_one_equals_plain_search() {
        let g = graph();
        let q = weights(&g);
        let list = decode_k(&q, 1, Execution::Parallel).unwrap();
        assert_eq!(list.paths, vec![q.best().unwrap()]);
    }

    #[test]
    fn policies_agree() {
        let g = graph();
        let q = weights(&g);
        assert_eq!(
            decode_k(&q, 4, Execution::Sequential).unwrap(),
            decode_k(&q, 4, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn forced_prefix_is_respected() {
        let g = graph();
        let q = weights(&g);
        let d = g.label_id("d").unwrap();
        let list = decode_k_with_prefix(&q, &[d], 10, Execution::Sequential).unwrap();
        assert_eq!(list.len(), 2);
        assert!(list.paths.iter().all(|p| p.labels[0] == d));
    }

    #[test]
    fn zero_k_is_rejected() {
        let g = graph();
        assert!(decode_k(&weights(&g), 0, Execution::Sequential).is_err());
    }
}
