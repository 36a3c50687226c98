//! Minimal deterministic acyclic automata over component tokens.
//!
//! The graph accepts exactly the set of component sequences it was built
//! from. Every accepted sequence is followed by a reserved end-of-sequence
//! edge `</s>` into a single sink, so the sink is the only final state.
//!
//! Node ids are topologically ordered: every edge `(u, v)` has `u < v`, the
//! source is node 0 and the sink is the last node. Label ids follow the byte
//! order of the label strings, except that `</s>` is always label 0. Out-edges
//! of every node are sorted by label id.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::language_of_token;
use crate::error::{Error, Result};

/// Reserved end-of-sequence label.
pub const EOS: &str = "</s>";

pub type NodeId = u32;
pub type LabelId = u32;

/// Label id of [`EOS`] in every graph.
pub const EOS_LABEL: LabelId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub label: LabelId,
    pub target: NodeId,
}

/// A frozen minimal DAFSA.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentGraph {
    labels: Vec<String>,
    label_ids: HashMap<String, LabelId>,
    offsets: Vec<usize>,
    edges: Vec<Edge>,
}

impl ComponentGraph {
    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn source(&self) -> NodeId {
        0
    }

    pub fn sink(&self) -> NodeId {
        (self.node_count() - 1) as NodeId
    }

    /// Out-edges of `u`, sorted by label.
    pub fn out_edges(&self, u: NodeId) -> &[Edge] {
        let u = u as usize;
        &self.edges[self.offsets[u]..self.offsets[u + 1]]
    }

    /// The target of the edge leaving `u` with `label`, if any.
    pub fn step(&self, u: NodeId, label: LabelId) -> Option<NodeId> {
        let out = self.out_edges(u);
        out.binary_search_by_key(&label, |e| e.label)
            .ok()
            .map(|i| out[i].target)
    }

    /// All labels including [`EOS`], indexed by label id.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: LabelId) -> &str {
        &self.labels[id as usize]
    }

    pub fn label_id(&self, label: &str) -> Option<LabelId> {
        self.label_ids.get(label).copied()
    }

    /// Follows `labels` from `start`, returning the node reached.
    pub fn walk(&self, start: NodeId, labels: &[LabelId]) -> Option<NodeId> {
        labels.iter().try_fold(start, |u, &l| self.step(u, l))
    }

    /// Follows string labels from the source.
    pub fn walk_str<S: AsRef<str>>(&self, start: NodeId, labels: &[S]) -> Option<NodeId> {
        labels.iter().try_fold(start, |u, l| {
            let id = self.label_id(l.as_ref())?;
            self.step(u, id)
        })
    }

    /// Whether `labels` (without `</s>`) is accepted when read from `start`.
    pub fn accepts_from<S: AsRef<str>>(&self, start: NodeId, labels: &[S]) -> bool {
        self.walk_str(start, labels)
            .and_then(|v| self.step(v, EOS_LABEL))
            .is_some_and(|v| v == self.sink())
    }

    pub fn accepts<S: AsRef<str>>(&self, labels: &[S]) -> bool {
        self.accepts_from(self.source(), labels)
    }

    /// In-degree of every node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count()];
        for e in &self.edges {
            deg[e.target as usize] += 1;
        }
        deg
    }

    /// Whether every non-source node has exactly one incoming edge.
    pub fn is_tree_shaped(&self) -> bool {
        // The sink is shared by construction; ignore it.
        let sink = self.sink() as usize;
        self.in_degrees()
            .iter()
            .enumerate()
            .all(|(v, &d)| v == 0 || v == sink || d == 1)
    }

    pub fn max_out_degree(&self) -> usize {
        (0..self.node_count())
            .map(|u| self.out_edges(u as NodeId).len())
            .max()
            .unwrap_or(0)
    }

    /// Language tokens on the source's out-edges.
    pub fn language_tokens(&self) -> Vec<&str> {
        self.out_edges(self.source())
            .iter()
            .map(|e| self.label(e.label))
            .filter(|l| language_of_token(l).is_some())
            .collect()
    }

    /// Exact number of source-to-sink paths.
    pub fn count_paths(&self) -> u128 {
        self.count_paths_from(self.source())
    }

    pub fn count_paths_from(&self, start: NodeId) -> u128 {
        let n = self.node_count();
        let mut to_sink = vec![0u128; n];
        to_sink[n - 1] = 1;
        for u in (start as usize..n - 1).rev() {
            to_sink[u] = self
                .out_edges(u as NodeId)
                .iter()
                .map(|e| to_sink[e.target as usize])
                .fold(0u128, u128::saturating_add);
        }
        to_sink[start as usize]
    }

    /// Up to `limit` accepted sequences in lexicographic order, `</s>` stripped.
    pub fn enumerate_paths(&self, limit: usize) -> Vec<Vec<String>> {
        self.enumerate_from(self.source(), limit)
            .into_iter()
            .map(|p| p.iter().map(|&l| self.label(l).to_owned()).collect())
            .collect()
    }

    /// Up to `limit` label-id paths from `start` to the sink, `</s>` stripped.
    ///
    /// Shorter sequences come before their extensions because `</s>` has the
    /// smallest label id; the remaining labels are compared by string.
    pub fn enumerate_from(&self, start: NodeId, limit: usize) -> Vec<Vec<LabelId>> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        let mut stack: Vec<(NodeId, usize)> = vec![(start, 0)];
        while out.len() < limit {
            let Some(frame) = stack.last_mut() else { break };
            let edges = self.out_edges(frame.0);
            if frame.1 >= edges.len() {
                stack.pop();
                path.pop();
                continue;
            }
            let e = edges[frame.1];
            frame.1 += 1;
            if e.label == EOS_LABEL {
                out.push(path.clone());
            } else {
                path.push(e.label);
                stack.push((e.target, 0));
            }
        }
        out
    }

    /// Node reached after the given language token, or the source when absent.
    pub fn language_start(&self, language_token: Option<&str>) -> Result<NodeId> {
        let Some(token) = language_token else {
            return Ok(self.source());
        };
        self.label_id(token)
            .and_then(|l| self.step(self.source(), l))
            .ok_or_else(|| Error::UnknownLanguage {
                token: token.to_owned(),
                available: self.language_tokens().into_iter().map(str::to_owned).collect(),
            })
    }

    /// Checks the structural invariants. Used after parsing and in tests.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n < 2 {
            return Err(Error::InvalidInput("graph needs a source and a sink".into()));
        }
        if self.labels.first().map(String::as_str) != Some(EOS) {
            return Err(Error::InvalidInput("label 0 must be </s>".into()));
        }
        let sink = self.sink();
        if !self.out_edges(sink).is_empty() {
            return Err(Error::InvalidInput("sink has out-edges".into()));
        }
        let mut reaches_sink = vec![false; n];
        reaches_sink[n - 1] = true;
        for u in (0..n - 1).rev() {
            let edges = self.out_edges(u as NodeId);
            if edges.is_empty() {
                return Err(Error::InvalidInput(format!("node {u} is a dead end")));
            }
            for w in edges.windows(2) {
                if w[0].label >= w[1].label {
                    return Err(Error::InvalidInput(format!(
                        "node {u} is nondeterministic or unsorted"
                    )));
                }
            }
            for e in edges {
                if e.target as usize <= u {
                    return Err(Error::InvalidInput(format!(
                        "edge {u} -> {} breaks topological order",
                        e.target
                    )));
                }
                if (e.label == EOS_LABEL) != (e.target == sink) {
                    return Err(Error::InvalidInput(format!(
                        "edge {u} -> {}: </s> edges must be exactly the edges into the sink",
                        e.target
                    )));
                }
            }
            reaches_sink[u] = edges.iter().any(|e| reaches_sink[e.target as usize]);
        }
        let deg = self.in_degrees();
        if let Some(v) = (1..n).find(|&v| deg[v] == 0) {
            return Err(Error::InvalidInput(format!("node {v} is unreachable")));
        }
        if !reaches_sink.iter().all(|&r| r) {
            return Err(Error::InvalidInput("some node cannot reach the sink".into()));
        }
        Ok(())
    }

    /// Text form: `u<TAB>v<TAB>label` per edge, then `final<TAB>sink`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for u in 0..self.node_count() {
            for e in self.out_edges(u as NodeId) {
                let _ = writeln!(out, "{u}\t{}\t{}", e.target, self.label(e.label));
            }
        }
        let _ = writeln!(out, "final\t{}", self.sink());
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut raw: Vec<(NodeId, NodeId, &str)> = Vec::new();
        let mut sink = None;
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::parse(path, idx + 1, m);
            match cols.as_slice() {
                ["final", s] => {
                    sink = Some(s.parse::<NodeId>().map_err(|_| bad("bad sink id"))?);
                }
                [u, v, label] if !label.is_empty() => {
                    let u = u.parse().map_err(|_| bad("bad source node id"))?;
                    let v = v.parse().map_err(|_| bad("bad target node id"))?;
                    raw.push((u, v, label));
                }
                _ => return Err(bad("expected `u\\tv\\tlabel` or `final\\tsink`")),
            }
        }
        let sink = sink.ok_or_else(|| Error::parse(path, 0, "missing `final` line"))?;
        let n = sink as usize + 1;
        if raw.iter().any(|&(u, v, _)| u as usize >= n || v as usize >= n) {
            return Err(Error::parse(path, 0, "node id beyond the sink"));
        }
        let interner = LabelInterner::new(raw.iter().map(|r| r.2));
        let mut adj: Vec<Vec<Edge>> = vec![Vec::new(); n];
        for &(u, v, label) in &raw {
            adj[u as usize].push(Edge { label: interner.id(label), target: v });
        }
        let g = ComponentGraph::from_adjacency(interner, adj);
        g.validate()
            .map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn from_adjacency(interner: LabelInterner, mut adj: Vec<Vec<Edge>>) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut edges = Vec::new();
        offsets.push(0);
        for out in &mut adj {
            out.sort_by_key(|e| e.label);
            edges.extend_from_slice(out);
            offsets.push(edges.len());
        }
        ComponentGraph {
            labels: interner.labels,
            label_ids: interner.ids,
            offsets,
            edges,
        }
    }
}

struct LabelInterner {
    labels: Vec<String>,
    ids: HashMap<String, LabelId>,
}

impl LabelInterner {
    fn new<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = labels.into_iter().filter(|&l| l != EOS).collect();
        let labels: Vec<String> = std::iter::once(EOS)
            .chain(set)
            .map(str::to_owned)
            .collect();
        let ids = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as LabelId))
            .collect();
        LabelInterner { labels, ids }
    }

    fn id(&self, label: &str) -> LabelId {
        self.ids[label]
    }
}

#[derive(Default)]
struct BuildState {
    edges: Vec<Edge>,
    is_final: bool,
}

/// Incremental construction of a minimal DAFSA from sorted input.
struct Builder {
    states: Vec<BuildState>,
    register: HashMap<(bool, Vec<Edge>), NodeId>,
    /// States along the previously inserted sequence; `path[0]` is the root.
    path: Vec<NodeId>,
    previous: Vec<LabelId>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            states: vec![BuildState::default()],
            register: HashMap::new(),
            path: vec![0],
            previous: Vec::new(),
        }
    }

    fn insert(&mut self, seq: &[LabelId]) {
        let common = seq
            .iter()
            .zip(&self.previous)
            .take_while(|(a, b)| a == b)
            .count();
        self.minimize_down_to(common);
        for &label in &seq[common..] {
            let id = self.states.len() as NodeId;
            self.states.push(BuildState::default());
            let u = *self.path.last().unwrap();
            self.states[u as usize].edges.push(Edge { label, target: id });
            self.path.push(id);
        }
        let last = *self.path.last().unwrap();
        self.states[last as usize].is_final = true;
        self.previous = seq.to_vec();
    }

    /// Replaces or registers the states of the previous sequence below `depth`.
    fn minimize_down_to(&mut self, depth: usize) {
        while self.path.len() > depth + 1 {
            let child = self.path.pop().unwrap();
            let parent = *self.path.last().unwrap();
            let state = &self.states[child as usize];
            let key = (state.is_final, state.edges.clone());
            match self.register.get(&key) {
                Some(&existing) => {
                    self.states[parent as usize].edges.last_mut().unwrap().target = existing;
                    self.states[child as usize] = BuildState::default();
                }
                None => {
                    self.register.insert(key, child);
                }
            }
        }
    }

    /// Renumbers reachable states in topological order (Kahn, FIFO, label order).
    fn finish(mut self, interner: LabelInterner) -> ComponentGraph {
        self.minimize_down_to(0);
        let root = 0usize;
        let mut reachable = vec![false; self.states.len()];
        let mut stack = vec![root];
        reachable[root] = true;
        while let Some(u) = stack.pop() {
            for e in &self.states[u].edges {
                if !reachable[e.target as usize] {
                    reachable[e.target as usize] = true;
                    stack.push(e.target as usize);
                }
            }
        }
        let mut indeg = vec![0usize; self.states.len()];
        for (u, s) in self.states.iter().enumerate() {
            if reachable[u] {
                for e in &s.edges {
                    indeg[e.target as usize] += 1;
                }
            }
        }
        let mut order = Vec::new();
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for e in &self.states[u].edges {
                let v = e.target as usize;
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        let mut new_id = vec![NodeId::MAX; self.states.len()];
        for (i, &u) in order.iter().enumerate() {
            new_id[u] = i as NodeId;
        }
        let adj = order
            .iter()
            .map(|&u| {
                self.states[u]
                    .edges
                    .iter()
                    .map(|e| Edge { label: e.label, target: new_id[e.target as usize] })
                    .collect()
            })
            .collect();
        ComponentGraph::from_adjacency(interner, adj)
    }
}

/// Builds the minimal DAFSA accepting exactly `sequences`.
pub fn build_graph<S: AsRef<str>>(sequences: &[Vec<S>]) -> Result<ComponentGraph> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("cannot build a graph from an empty set".into()));
    }
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty component sequence".into()));
        }
        if let Some(bad) = seq.iter().find(|l| {
            let l = l.as_ref();
            l == EOS || l.is_empty() || l.contains(char::is_whitespace)
        }) {
            return Err(Error::InvalidInput(format!("invalid label `{}`", bad.as_ref())));
        }
    }
    let interner = LabelInterner::new(sequences.iter().flatten().map(|l| l.as_ref()));
    let mut encoded: Vec<Vec<LabelId>> = sequences
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|l| interner.id(l.as_ref()))
                .chain(std::iter::once(EOS_LABEL))
                .collect()
        })
        .collect();
    encoded.sort_unstable();
    encoded.dedup();

    let mut builder = Builder::new();
    for seq in &encoded {
        builder.insert(seq);
    }
    Ok(builder.finish(interner))
}

/// Minimal DAFSA accepting the union of the graphs' languages.
pub fn union_graphs(graphs: &[ComponentGraph]) -> Result<ComponentGraph> {
    let mut all: Vec<Vec<String>> = Vec::new();
    for g in graphs {
        all.extend(g.enumerate_paths(usize::MAX));
    }
    build_graph(&all)
}

/// Number of states in the trie of `sequences` (root and one state per distinct
/// prefix), plus the shared sink the `</s>` convention adds. For
/// `{a b, a c, d b, d c}` this is the 7-state trie plus the sink.
pub fn trie_node_count<S: AsRef<str>>(sequences: &[Vec<S>]) -> usize {
    let mut prefixes: BTreeSet<Vec<&str>> = BTreeSet::new();
    for seq in sequences {
        for i in 1..=seq.len() {
            prefixes.insert(seq[..i].iter().map(|s| s.as_ref()).collect());
        }
    }
    prefixes.len() + 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seqs(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_owned).collect())
            .collect()
    }

    fn fig2() -> ComponentGraph {
        build_graph(&seqs(&["2C numeric math ceil arg", "2Clojure algo math ceil x"])).unwrap()
    }

    #[test]
    fn two_language_graph() {
        let g = fig2();
        g.validate().unwrap();
        assert_eq!(g.count_paths(), 2);
        assert_eq!(
            g.enumerate_paths(10),
            seqs(&["2C numeric math ceil arg", "2Clojure algo math ceil x"])
        );
        assert!(g.accepts(&["2C", "numeric", "math", "ceil", "arg"]));
        assert!(!g.accepts(&["2C", "numeric", "math", "ceil"]));
        assert_eq!(g.language_tokens(), ["2C", "2Clojure"]);
    }

    #[test]
    fn single_sequence() {
        let g = build_graph(&seqs(&["a"])).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.count_paths(), 1);
    }

    #[test]
    fn suffix_sharing() {
        let s = seqs(&["a b", "a c", "d b", "d c"]);
        let g = build_graph(&s).unwrap();
        // source, one shared middle state, the pre-EOS state, sink
        assert_eq!(g.node_count(), 4);
        assert!(g.node_count() < trie_node_count(&s));
        assert_eq!(g.enumerate_paths(100), s);
    }

    #[test]
    fn language_start_modes() {
        let g = fig2();
        assert_eq!(g.language_start(None).unwrap(), g.source());
        let c = g.language_start(Some("2C")).unwrap();
        let from_c = g.enumerate_from(c, 10);
        assert_eq!(from_c.len(), 1);
        assert_eq!(g.label(from_c[0][0]), "numeric");
        let err = g.language_start(Some("2Fortran")).unwrap_err();
        assert!(err.to_string().contains("2Clojure"), "{err}");
    }

    #[test]
    fn enumeration_order_and_limit() {
        let g = build_graph(&seqs(&["b", "a"])).unwrap();
        assert_eq!(g.enumerate_paths(10), seqs(&["a", "b"]));
        assert_eq!(g.enumerate_paths(1), seqs(&["a"]));
        let g = build_graph(&seqs(&["a b", "a", "!x"])).unwrap();
        assert_eq!(g.enumerate_paths(10), seqs(&["!x", "a", "a b"]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_graph::<String>(&[]).is_err());
        assert!(build_graph(&[Vec::<String>::new()]).is_err());
        assert!(build_graph(&seqs(&["a </s>"])).is_err());
    }

    #[test]
    fn union_of_disjoint_and_identical() {
        let a = build_graph(&seqs(&["2C x"])).unwrap();
        let b = build_graph(&seqs(&["2Clojure y"])).unwrap();
        let u = union_graphs(&[a.clone(), b]).unwrap();
        assert_eq!(u.enumerate_paths(10), seqs(&["2C x", "2Clojure y"]));
        let aa = union_graphs(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(aa, a);
    }

    #[test]
    fn text_round_trip() {
        let g = fig2();
        let text = g.to_text();
        assert!(text.ends_with(&format!("final\t{}\n", g.sink())));
        let back = ComponentGraph::parse(&text, Path::new("g")).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn parse_rejects_cycles_and_garbage() {
        assert!(ComponentGraph::parse("0\t1\ta\n1\t0\tb\n1\t2\t</s>\nfinal\t2\n", Path::new("g")).is_err());
        assert!(ComponentGraph::parse("0\t1\ta\n0\t1\ta\n1\t2\t</s>\nfinal\t2\n", Path::new("g")).is_err());
        assert!(ComponentGraph::parse("0 1 a\n", Path::new("g")).is_err());
        assert!(ComponentGraph::parse("0\t1\ta\n", Path::new("g")).is_err());
    }

    proptest! {
        #[test]
        fn accepted_set_is_exact(raw in prop::collection::btree_set(
            prop::collection::vec(0u8..6, 1..6), 1..40)) {
            let s: Vec<Vec<String>> = raw
                .iter()
                .map(|seq| seq.iter().map(|c| format!("t{c}")).collect())
                .collect();
            let g = build_graph(&s).unwrap();
            g.validate().unwrap();
            let mut expected = s.clone();
            expected.sort();
            prop_assert_eq!(g.enumerate_paths(usize::MAX), expected);
            prop_assert_eq!(g.count_paths(), s.len() as u128);
            prop_assert!(g.node_count() <= trie_node_count(&s));
        }
    }
}
