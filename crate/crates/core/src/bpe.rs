//! Byte-pair subword encoding.
//!
//! Words are split into characters followed by a separate end-of-word symbol
//! `</w>`. Learning greedily merges the most frequent adjacent symbol pair
//! (ties go to word-internal pairs, then to the lexicographically smallest pair). Encoded output attaches
//! the end-of-word marker to the last piece of each word, so `lowest` with the
//! merges `l o`, `lo w` encodes to `low e s t</w>`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{Pair, ParallelCorpus};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

/// Pairs seen fewer times than this are never merged.
const MIN_PAIR_FREQUENCY: u64 = 2;

/// Which side(s) of a corpus to learn from or encode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
    #[default]
    Both,
}

impl Side {
    fn source(self) -> bool {
        matches!(self, Side::Source | Side::Both)
    }
    fn target(self) -> bool {
        matches!(self, Side::Target | Side::Both)
    }
}

/// An ordered list of merge rules.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            ranks.entry(m.clone()).or_insert(i);
        }
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Splits one word into subword pieces.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        symbols.push(END_OF_WORD.to_owned());

        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }

        if symbols.len() > 1 && symbols.last().map(String::as_str) == Some(END_OF_WORD) {
            symbols.pop();
            if let Some(last) = symbols.last_mut() {
                last.push_str(END_OF_WORD);
            }
        }
        symbols
    }

    /// Encodes a token sequence.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.encode_word(t)).collect()
    }

    /// Encodes the configured side(s) of a corpus. Language tokens are kept whole.
    pub fn apply_to_corpus(&self, corpus: &ParallelCorpus, side: Side) -> ParallelCorpus {
        let pairs = corpus
            .pairs
            .iter()
            .map(|p| {
                let source = if side.source() { self.apply(&p.source) } else { p.source.clone() };
                let target = if side.target() {
                    let skip = usize::from(p.tag.is_some());
                    let mut t = p.target[..skip].to_vec();
                    t.extend(self.apply(&p.target[skip..]));
                    t
                } else {
                    p.target.clone()
                };
                Pair { source, target, tag: p.tag.clone() }
            })
            .collect();
        ParallelCorpus::from_pairs(pairs)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut merges = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::parse(path, idx + 1, "expected two space-separated symbols"));
            }
            merges.push((parts[0].to_owned(), parts[1].to_owned()));
        }
        Ok(BpeModel::from_merges(merges))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Reverses [`BpeModel::apply`]: concatenates pieces and splits at end-of-word markers.
/// A trailing piece without a marker is returned as its own word.
pub fn join_pieces(pieces: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for p in pieces {
        match p.strip_suffix(END_OF_WORD) {
            Some(head) => {
                current.push_str(head);
                words.push(std::mem::take(&mut current));
            }
            None => current.push_str(p),
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Heap entry: highest count first, then the lexicographically smallest pair.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    /// Word-final pairs lose ties to word-internal ones, then lexicographic order.
    pair: Reverse<(bool, String, String)>,
    ids: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.pair.cmp(&other.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Learner {
    symbols: Vec<String>,
    symbol_ids: HashMap<String, u32>,
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    pair_counts: HashMap<(u32, u32), u64>,
    occurs_in: HashMap<(u32, u32), BTreeSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Learner {
    fn new(word_freqs: BTreeMap<&str, u64>) -> Self {
        let mut learner = Learner {
            symbols: Vec::new(),
            symbol_ids: HashMap::new(),
            words: Vec::with_capacity(word_freqs.len()),
            freqs: Vec::with_capacity(word_freqs.len()),
            pair_counts: HashMap::new(),
            occurs_in: HashMap::new(),
            heap: BinaryHeap::new(),
        };
        for (word, freq) in word_freqs {
            let mut syms: Vec<u32> = word.chars().map(|c| learner.intern(&c.to_string())).collect();
            syms.push(learner.intern(END_OF_WORD));
            let idx = learner.words.len();
            for w in syms.windows(2) {
                let pair = (w[0], w[1]);
                *learner.pair_counts.entry(pair).or_default() += freq;
                learner.occurs_in.entry(pair).or_default().insert(idx);
            }
            learner.words.push(syms);
            learner.freqs.push(freq);
        }
        let pairs: Vec<(u32, u32)> = learner.pair_counts.keys().copied().collect();
        for pair in pairs {
            learner.push(pair);
        }
        learner
    }

    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.symbol_ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_owned());
        self.symbol_ids.insert(s.to_owned(), id);
        id
    }

    fn push(&mut self, ids: (u32, u32)) {
        let count = self.pair_counts.get(&ids).copied().unwrap_or(0);
        if count > 0 {
            let (a, b) = (&self.symbols[ids.0 as usize], &self.symbols[ids.1 as usize]);
            let pair = (b.ends_with(END_OF_WORD), a.clone(), b.clone());
            self.heap.push(Candidate { count, pair: Reverse(pair), ids });
        }
    }

    fn best(&mut self) -> Option<(u32, u32)> {
        while let Some(top) = self.heap.pop() {
            if self.pair_counts.get(&top.ids).copied() == Some(top.count) {
                return (top.count >= MIN_PAIR_FREQUENCY).then_some(top.ids);
            }
        }
        None
    }

    fn merge(&mut self, (a, b): (u32, u32)) {
        let merged_str = format!("{}{}", self.symbols[a as usize], self.symbols[b as usize]);
        let merged = self.intern(&merged_str);
        let affected = self.occurs_in.remove(&(a, b)).unwrap_or_default();
        let mut touched = BTreeSet::new();
        for idx in affected {
            let freq = self.freqs[idx];
            let old = std::mem::take(&mut self.words[idx]);
            if !old.windows(2).any(|w| w[0] == a && w[1] == b) {
                self.words[idx] = old;
                continue;
            }
            for w in old.windows(2) {
                let pair = (w[0], w[1]);
                if let Some(c) = self.pair_counts.get_mut(&pair) {
                    *c -= freq;
                }
                touched.insert(pair);
            }
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == a && old[i + 1] == b {
                    new.push(merged);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            for w in new.windows(2) {
                let pair = (w[0], w[1]);
                *self.pair_counts.entry(pair).or_default() += freq;
                self.occurs_in.entry(pair).or_default().insert(idx);
                touched.insert(pair);
            }
            self.words[idx] = new;
        }
        self.pair_counts.remove(&(a, b));
        for pair in touched {
            self.push(pair);
        }
    }
}

/// Learns up to `merge_count` merges from word frequencies on the chosen side(s).
pub fn learn_bpe(corpus: &ParallelCorpus, merge_count: usize, side: Side) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot learn BPE from an empty corpus".into()));
    }
    let mut freqs: BTreeMap<&str, u64> = BTreeMap::new();
    for p in &corpus.pairs {
        if side.source() {
            for w in &p.source {
                *freqs.entry(w).or_default() += 1;
            }
        }
        if side.target() {
            for w in &p.target[usize::from(p.tag.is_some())..] {
                *freqs.entry(w).or_default() += 1;
            }
        }
    }
    Ok(learn_from_counts(freqs, merge_count))
}

/// Learns merges directly from a word-frequency table.
pub fn learn_from_counts(freqs: BTreeMap<&str, u64>, merge_count: usize) -> BpeModel {
    let mut learner = Learner::new(freqs);
    let mut merges = Vec::with_capacity(merge_count.min(1 << 16));
    while merges.len() < merge_count {
        let Some(pair) = learner.best() else { break };
        merges.push((
            learner.symbols[pair.0 as usize].clone(),
            learner.symbols[pair.1 as usize].clone(),
        ));
        learner.merge(pair);
    }
    BpeModel::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn merges(m: &BpeModel) -> Vec<(&str, &str)> {
        m.merges().iter().map(|(a, b)| (a.as_str(), b.as_str())).collect()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn low_lowest_first_two_merges() {
        let freqs = BTreeMap::from([("low", 5), ("lowest", 2)]);
        let m = learn_from_counts(freqs, 2);
        assert_eq!(merges(&m), [("l", "o"), ("lo", "w")]);
    }

    #[test]
    fn single_pair_word() {
        let m = learn_from_counts(BTreeMap::from([("aa", 3)]), 1);
        assert_eq!(merges(&m), [("a", "a")]);
    }

    #[test]
    fn zero_merges_is_character_identity() {
        let m = learn_from_counts(BTreeMap::from([("abc", 4)]), 0);
        assert_eq!(m.merge_count(), 0);
        assert_eq!(m.encode_word("abc"), ["a", "b", "c</w>"]);
    }

    #[test]
    fn hand_applied_merges() {
        let m = BpeModel::from_merges(vec![("l".into(), "o".into()), ("lo".into(), "w".into())]);
        assert_eq!(m.encode_word("lowest"), ["low", "e", "s", "t</w>"]);
        assert_eq!(m.encode_word("zq"), ["z", "q</w>"]);
    }

    #[test]
    fn learned_from_corpus_sides() {
        let corpus = ParallelCorpus::from_pairs(vec![
            Pair::new(toks("low low"), toks("x"), Some("C".into())).unwrap(),
            Pair::new(toks("lowest"), toks("x"), None).unwrap(),
        ]);
        let m = learn_bpe(&corpus, 10, Side::Source).unwrap();
        assert_eq!(m.merges()[0], ("l".into(), "o".into()));
        let encoded = m.apply_to_corpus(&corpus, Side::Both);
        assert_eq!(encoded.pairs[0].target[0], "2C");
        assert_eq!(join_pieces(&encoded.pairs[1].source), ["lowest"]);
        assert!(learn_bpe(&ParallelCorpus::default(), 1, Side::Both).is_err());
    }

    #[test]
    fn merge_file_round_trip() {
        let m = learn_from_counts(BTreeMap::from([("banana", 3), ("bandana", 2)]), 5);
        let back = BpeModel::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert!(BpeModel::parse("a b c\n", Path::new("m")).is_err());
    }

    proptest! {
        #[test]
        fn encoding_round_trips(
            words in prop::collection::vec("[a-e]{1,8}", 1..12),
            probe in prop::collection::vec("[a-gé]{1,10}", 1..6),
            n in 0usize..30,
        ) {
            let mut freqs = BTreeMap::new();
            for w in &words {
                *freqs.entry(w.as_str()).or_insert(0u64) += 1;
            }
            let model = learn_from_counts(freqs, n);
            prop_assert_eq!(join_pieces(&model.apply(&probe)), probe.clone());
            // Deterministic re-learning.
            let mut freqs = BTreeMap::new();
            for w in &words {
                *freqs.entry(w.as_str()).or_insert(0u64) += 1;
            }
            prop_assert_eq!(learn_from_counts(freqs, n), model);
        }
    }
}
