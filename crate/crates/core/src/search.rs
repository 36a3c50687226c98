//! Types shared by the graph decoders and the k-best engine.

use crate::automaton::{ComponentGraph, LabelId, NodeId, EOS_LABEL};
use crate::corpus::language_of_token;
use crate::error::{Error, Result};

/// Where a search starts, and the labels that lead there from the graph source.
///
/// In polyglot mode the start is the source and `context` is empty. In
/// monolingual mode the start is the node after a language token and
/// `context` holds that token. Context labels are never scored; a neural
/// scorer feeds them to its decoder before searching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchStart {
    pub node: NodeId,
    pub context: Vec<LabelId>,
}

impl SearchStart {
    pub fn source(graph: &ComponentGraph) -> Self {
        SearchStart { node: graph.source(), context: Vec::new() }
    }

    /// Polyglot start for `None`, otherwise the node after `language_token`.
    pub fn for_language(graph: &ComponentGraph, language_token: Option<&str>) -> Result<Self> {
        let node = graph.language_start(language_token)?;
        let context = match language_token {
            Some(t) => vec![graph.label_id(t).expect("language_start checked the label")],
            None => Vec::new(),
        };
        Ok(SearchStart { node, context })
    }

    /// A start at an arbitrary node reached by `context` from the source.
    pub fn at(graph: &ComponentGraph, context: Vec<LabelId>) -> Result<Self> {
        let node = graph
            .walk(graph.source(), &context)
            .ok_or_else(|| Error::InvalidInput("context is not a path from the source".into()))?;
        Ok(SearchStart { node, context })
    }
}

/// A path from the search start to the sink. `labels` ends with `</s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPath {
    pub labels: Vec<LabelId>,
    /// Negative log score.
    pub score: f64,
}

impl ScoredPath {
    /// Labels without the trailing `</s>`.
    pub fn body(&self) -> &[LabelId] {
        match self.labels.split_last() {
            Some((&EOS_LABEL, rest)) => rest,
            _ => &self.labels,
        }
    }
}

/// A prefix-forced, edge-banned search request.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstrainedDecodeRequest {
    /// Labels that must be taken first, starting at the search start.
    pub forced_prefix: Vec<LabelId>,
    /// Labels that may not be taken out of the node the prefix ends at.
    pub banned: Vec<LabelId>,
}

/// Instrumentation counters for one search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Nodes expanded (finite score).
    pub nodes_visited: usize,
    /// Out-edges examined across expanded nodes.
    pub edges_examined: usize,
    /// Edges dropped by a beam cut.
    pub edges_pruned: usize,
    /// Relaxations that replaced an already stored search state.
    pub state_clobbers: usize,
    /// Adjacency labels missing from the scorer's vocabulary.
    pub unknown_labels: usize,
}

impl SearchStats {
    pub fn add(&mut self, other: &SearchStats) {
        self.nodes_visited += other.nodes_visited;
        self.edges_examined += other.edges_examined;
        self.edges_pruned += other.edges_pruned;
        self.state_clobbers += other.state_clobbers;
        self.unknown_labels += other.unknown_labels;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub path: Option<ScoredPath>,
    pub stats: SearchStats,
}

/// A scorer prepared for one input and one search start.
///
/// Implementations must be deterministic: equal requests give bit-identical
/// outcomes.
pub trait SuffixSearch: Sync {
    fn graph(&self) -> &ComponentGraph;

    fn start(&self) -> &SearchStart;

    /// Best path from the start that begins with the forced prefix and avoids
    /// the banned labels at the prefix end. `None` when no such path survives.
    fn search(&self, request: &ConstrainedDecodeRequest) -> Result<SearchOutcome>;

    /// Model score of a complete path from the start (labels end with `</s>`).
    fn rescore(&self, labels: &[LabelId]) -> Result<f64>;

    /// Unconstrained best path.
    fn best(&self) -> Result<ScoredPath> {
        self.search(&ConstrainedDecodeRequest::default())?
            .path
            .ok_or_else(|| Error::Search("no path reaches the sink".into()))
    }
}

/// A decoded output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Labels from the graph source, language token included, `</s>` excluded.
    pub labels: Vec<String>,
    /// Negative log score of the searched part of the path.
    pub score: f64,
    /// Output language, when the path starts with a language token.
    pub language: Option<String>,
}

impl Translation {
    pub fn from_path(graph: &ComponentGraph, start: &SearchStart, path: &ScoredPath) -> Self {
        let labels: Vec<String> = start
            .context
            .iter()
            .chain(path.body())
            .map(|&l| graph.label(l).to_owned())
            .collect();
        let language = labels
            .first()
            .and_then(|l| language_of_token(l))
            .map(str::to_owned);
        Translation { labels, score: path.score, language }
    }

    /// Labels with the language token removed.
    pub fn component(&self) -> &[String] {
        if self.language.is_some() {
            &self.labels[1..]
        } else {
            &self.labels
        }
    }
}
