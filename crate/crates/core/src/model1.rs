//! IBM Model 1 lexical translation tables trained by EM.
//!
//! A [`TranslationTable`] stores one conditional direction: `p(emitted | given)`.
//! The forward table is `p_t(x | z)` (text word given component token) and
//! the inverse table is `p_t'(z | x)`, trained as a separate run with the
//! roles swapped. Rows are sparse over the co-occurring tokens; lookups of
//! unseen pairs return the table's floor.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::par::Execution;

/// Reserved token standing for the empty alignment position.
pub const NULL_TOKEN: &str = "<null>";

pub const DEFAULT_FLOOR: f64 = 1e-10;
pub const DEFAULT_ITERATIONS: usize = 10;

/// Pairs per work item in the E-step.
const EM_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `p_t(x | z)`: text word given component token.
    Forward,
    /// `p_t'(z | x)`: component token given text word.
    Inverse,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Inverse => "inverse",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model1Options {
    pub iterations: usize,
    pub direction: Direction,
    /// Whether the NULL token takes part as alignment position 0.
    pub null: bool,
    pub floor: f64,
}

impl Default for Model1Options {
    fn default() -> Self {
        Model1Options {
            iterations: DEFAULT_ITERATIONS,
            direction: Direction::Forward,
            null: true,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_sorted(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, ids }
    }

    fn id(&self, w: &str) -> Option<u32> {
        self.ids.get(w).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Row {
    emitted: Vec<u32>,
    probs: Vec<f64>,
}

impl Row {
    fn position(&self, e: u32) -> Option<usize> {
        self.emitted.binary_search(&e).ok()
    }
}

/// Sparse conditional table `p(emitted | given)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTable {
    direction: Direction,
    given: Vocab,
    emitted: Vocab,
    rows: Vec<Row>,
    null: Option<u32>,
    floor: f64,
}

/// Corpus log-likelihood before training and after each EM iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmTrace {
    pub log_likelihood: Vec<f64>,
}

impl EmTrace {
    pub fn is_non_decreasing(&self, tolerance: f64) -> bool {
        self.log_likelihood
            .windows(2)
            .all(|w| w[1] >= w[0] - tolerance)
    }
}

impl TranslationTable {
    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn has_null(&self) -> bool {
        self.null.is_some()
    }

    /// `p(emitted | given)`, or the floor for unseen pairs.
    pub fn prob(&self, emitted: &str, given: &str) -> f64 {
        match (self.emitted.id(emitted), self.given.id(given)) {
            (Some(e), Some(g)) => self.prob_ids(e, g),
            _ => self.floor,
        }
    }

    /// `p_t(x | z)` for a forward table; `p_t'(z | x)` is `prob(z, x)` on an inverse one.
    pub fn lookup(&self, x: &str, z: &str) -> f64 {
        match self.direction {
            Direction::Forward => self.prob(x, z),
            Direction::Inverse => self.prob(z, x),
        }
    }

    /// `p(emitted | NULL)`; zero when the table was trained without NULL.
    pub fn null_prob(&self, emitted: &str) -> f64 {
        match self.null {
            Some(g) => self.emitted.id(emitted).map_or(self.floor, |e| self.prob_ids(e, g)),
            None => 0.0,
        }
    }

    fn prob_ids(&self, e: u32, g: u32) -> f64 {
        let row = &self.rows[g as usize];
        row.position(e).map_or(self.floor, |p| row.probs[p])
    }

    /// The stored distribution for `given`, as `(emitted, probability)` pairs.
    pub fn row(&self, given: &str) -> Vec<(&str, f64)> {
        self.given.id(given).map_or_else(Vec::new, |g| {
            let row = &self.rows[g as usize];
            row.emitted
                .iter()
                .zip(&row.probs)
                .map(|(&e, &p)| (self.emitted.words[e as usize].as_str(), p))
                .collect()
        })
    }

    /// Conditioning tokens, NULL included.
    pub fn given_tokens(&self) -> &[String] {
        &self.given.words
    }

    /// Inner sums `Σ_{i=0..|given|} p(e_j | g_i)` for each emitted token.
    pub fn inner_sums<E: AsRef<str>, G: AsRef<str>>(&self, emitted: &[E], given: &[G]) -> Vec<f64> {
        emitted
            .iter()
            .map(|e| {
                let e = e.as_ref();
                given
                    .iter()
                    .fold(self.null_prob(e), |acc, g| acc + self.prob(e, g.as_ref()))
            })
            .collect()
    }

    /// `Σ_j ln Σ_i p(e_j | g_i)`, minus `|e| ln(|g| + 1)` when `normalize` is set.
    pub fn sentence_log_likelihood<E: AsRef<str>, G: AsRef<str>>(
        &self,
        emitted: &[E],
        given: &[G],
        normalize: bool,
    ) -> f64 {
        let mut ll: f64 = self.inner_sums(emitted, given).iter().map(|s| s.ln()).sum();
        if normalize {
            ll -= emitted.len() as f64 * ((given.len() + 1) as f64).ln();
        }
        ll
    }

    /// Model 1 likelihood `∏_j Σ_{i=0..|z|} p(x_j | z_i)` of text `x` given
    /// components `z`, times `1 / (|z|+1)^|x|` when `normalize` is set.
    /// Only meaningful on a forward table.
    pub fn sentence_likelihood<X: AsRef<str>, Z: AsRef<str>>(&self, x: &[X], z: &[Z], normalize: bool) -> f64 {
        let product: f64 = self.inner_sums(x, z).iter().product();
        if normalize {
            product / ((z.len() + 1) as f64).powi(x.len() as i32)
        } else {
            product
        }
    }

    /// Table text: a header line, then `given<TAB>emitted<TAB>probability`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let null = if self.null.is_some() { NULL_TOKEN } else { "none" };
        let _ = writeln!(
            out,
            "#model1\tdirection={}\tfloor={:e}\tnull={null}",
            self.direction.name(),
            self.floor
        );
        for (g, row) in self.rows.iter().enumerate() {
            for (&e, &p) in row.emitted.iter().zip(&row.probs).filter(|(_, &p)| p > 0.0) {
                let _ = writeln!(out, "{}\t{}\t{p:e}", self.given.words[g], self.emitted.words[e as usize]);
            }
        }
        out
    }

    /// Parses one or more tables, each starting with its `#model1` header.
    pub fn parse_many(text: &str, path: &Path) -> Result<Vec<TranslationTable>> {
        let mut tables = Vec::new();
        let mut current: Option<(Direction, f64, bool, Vec<(String, String, f64)>)> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix("#model1") {
                if let Some(t) = current.take() {
                    tables.push(Self::assemble(t));
                }
                let mut direction = None;
                let mut floor = None;
                let mut null = None;
                for field in header.split('\t').filter(|f| !f.is_empty()) {
                    match field.split_once('=') {
                        Some(("direction", "forward")) => direction = Some(Direction::Forward),
                        Some(("direction", "inverse")) => direction = Some(Direction::Inverse),
                        Some(("floor", v)) => floor = v.parse::<f64>().ok(),
                        Some(("null", v)) => null = Some(v == NULL_TOKEN),
                        _ => return Err(Error::parse(path, lineno, format!("bad header field `{field}`"))),
                    }
                }
                match (direction, floor, null) {
                    (Some(d), Some(f), Some(n)) if f > 0.0 => current = Some((d, f, n, Vec::new())),
                    _ => return Err(Error::parse(path, lineno, "header needs direction, floor and null")),
                }
                continue;
            }
            let Some((_, _, _, entries)) = current.as_mut() else {
                return Err(Error::parse(path, lineno, "entry before any #model1 header"));
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [g, e, p] = cols.as_slice() else {
                return Err(Error::parse(path, lineno, "expected given<TAB>emitted<TAB>probability"));
            };
            let p: f64 = p
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad probability"))?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::parse(path, lineno, "probability outside (0, 1]"));
            }
            entries.push((g.to_string(), e.to_string(), p));
        }
        if let Some(t) = current.take() {
            tables.push(Self::assemble(t));
        }
        if tables.is_empty() {
            return Err(Error::parse(path, 0, "no #model1 table found"));
        }
        Ok(tables)
    }

    /// Builds a table from `(given, emitted, probability)` entries, as stored.
    /// Rows are not renormalized.
    pub fn from_entries(
        direction: Direction,
        floor: f64,
        null: bool,
        entries: Vec<(String, String, f64)>,
    ) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::InvalidInput("floor must lie in (0, 1)".into()));
        }
        if let Some(bad) = entries.iter().find(|e| !(e.2 > 0.0 && e.2 <= 1.0)) {
            return Err(Error::InvalidInput(format!("probability {} outside (0, 1]", bad.2)));
        }
        Ok(Self::assemble((direction, floor, null, entries)))
    }

    fn assemble((direction, floor, null, entries): (Direction, f64, bool, Vec<(String, String, f64)>)) -> Self {
        let mut given: BTreeSet<String> = entries.iter().map(|e| e.0.clone()).collect();
        if null {
            given.insert(NULL_TOKEN.to_owned());
        }
        let emitted: BTreeSet<String> = entries.iter().map(|e| e.1.clone()).collect();
        let given = Vocab::from_sorted(given.into_iter().collect());
        let emitted = Vocab::from_sorted(emitted.into_iter().collect());
        let mut rows = vec![Row::default(); given.words.len()];
        let mut sorted: Vec<(u32, u32, f64)> = entries
            .iter()
            .map(|(g, e, p)| (given.id(g).unwrap(), emitted.id(e).unwrap(), *p))
            .collect();
        sorted.sort_by_key(|&(g, e, _)| (g, e));
        for (g, e, p) in sorted {
            let row = &mut rows[g as usize];
            row.emitted.push(e);
            row.probs.push(p);
        }
        let null = null.then(|| given.id(NULL_TOKEN).unwrap());
        TranslationTable { direction, given, emitted, rows, null, floor }
    }
}

/// The forward and inverse tables used by the decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct LexicalModel {
    pub forward: TranslationTable,
    pub inverse: TranslationTable,
}

impl LexicalModel {
    pub fn to_text(&self) -> String {
        let mut s = self.forward.to_text();
        s.push_str(&self.inverse.to_text());
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tables = TranslationTable::parse_many(&text, path)?;
        let pick = |d: Direction| {
            tables
                .iter()
                .find(|t| t.direction == d)
                .cloned()
                .ok_or_else(|| Error::parse(path, 0, format!("missing {} table", d.name())))
        };
        Ok(LexicalModel {
            forward: pick(Direction::Forward)?,
            inverse: pick(Direction::Inverse)?,
        })
    }
}

/// Trains both directions with otherwise equal options.
pub fn train_lexical_model(
    corpus: &ParallelCorpus,
    options: &Model1Options,
    exec: Execution,
) -> Result<(LexicalModel, EmTrace, EmTrace)> {
    let fwd = Model1Options { direction: Direction::Forward, ..options.clone() };
    let inv = Model1Options { direction: Direction::Inverse, ..options.clone() };
    let (forward, ft) = train_model1(corpus, &fwd, exec)?;
    let (inverse, it) = train_model1(corpus, &inv, exec)?;
    Ok((LexicalModel { forward, inverse }, ft, it))
}

/// Encoded training pair: emitted ids and given ids (NULL first when enabled).
struct Sentence {
    emitted: Vec<u32>,
    given: Vec<u32>,
}

/// Runs Model 1 EM from a uniform start over co-occurring pairs.
pub fn train_model1(
    corpus: &ParallelCorpus,
    options: &Model1Options,
    exec: Execution,
) -> Result<(TranslationTable, EmTrace)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty corpus".into()));
    }
    if options.iterations == 0 {
        return Err(Error::InvalidInput("iterations must be at least 1".into()));
    }
    if !(options.floor > 0.0 && options.floor < 1.0) {
        return Err(Error::InvalidInput("floor must lie in (0, 1)".into()));
    }
    let sides = |p: &crate::corpus::Pair| match options.direction {
        Direction::Forward => (p.source.clone(), p.target.clone()),
        Direction::Inverse => (p.target.clone(), p.source.clone()),
    };

    let mut given_words: BTreeSet<String> = BTreeSet::new();
    let mut emitted_words: BTreeSet<String> = BTreeSet::new();
    for p in &corpus.pairs {
        let (e, g) = sides(p);
        emitted_words.extend(e);
        given_words.extend(g);
    }
    if options.null {
        given_words.insert(NULL_TOKEN.to_owned());
    }
    let given = Vocab::from_sorted(given_words.into_iter().collect());
    let emitted = Vocab::from_sorted(emitted_words.into_iter().collect());
    let null = options.null.then(|| given.id(NULL_TOKEN).unwrap());

    let sentences: Vec<Sentence> = corpus
        .pairs
        .iter()
        .map(|p| {
            let (e, g) = sides(p);
            Sentence {
                emitted: e.iter().map(|w| emitted.id(w).unwrap()).collect(),
                given: null
                    .into_iter()
                    .chain(g.iter().map(|w| given.id(w).unwrap()))
                    .collect(),
            }
        })
        .collect();

    let mut cooc: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); given.words.len()];
    for s in &sentences {
        for &g in &s.given {
            cooc[g as usize].extend(s.emitted.iter().copied());
        }
    }
    let mut rows: Vec<Row> = cooc
        .into_iter()
        .map(|set| {
            let n = set.len();
            Row {
                emitted: set.into_iter().collect(),
                probs: vec![1.0 / n.max(1) as f64; n],
            }
        })
        .collect();

    let mut table = TranslationTable {
        direction: options.direction,
        given,
        emitted,
        rows: Vec::new(),
        null,
        floor: options.floor,
    };

    let mut trace = EmTrace::default();
    for _ in 0..options.iterations {
        let (ll, counts) = expectation(&rows, &sentences, exec, true, null.is_some());
        trace.log_likelihood.push(ll);
        maximize(&mut rows, counts, exec);
    }
    let (ll, _) = expectation(&rows, &sentences, exec, false, null.is_some());
    trace.log_likelihood.push(ll);

    table.rows = rows;
    Ok((table, trace))
}

/// E-step. Returns the corpus log-likelihood (with the `1/(|g|+1)^|e|`
/// normalizer, NULL not counted in `|g|`) and, if requested, expected counts
/// laid out like the rows.
///
/// Posteriors are computed per chunk, possibly in parallel, as ordered
/// contribution lists; they are then added in corpus order, so the result
/// does not depend on the execution policy.
fn expectation(
    rows: &[Row],
    sentences: &[Sentence],
    exec: Execution,
    want_counts: bool,
    has_null: bool,
) -> (f64, Vec<Vec<f64>>) {
    let per_chunk = exec.map_chunks(sentences, EM_CHUNK, |chunk| {
        let mut ll = 0.0;
        let mut contributions: Vec<(u32, u32, f64)> = Vec::new();
        let mut probs = Vec::new();
        let mut positions = Vec::new();
        for s in chunk {
            for &e in &s.emitted {
                probs.clear();
                positions.clear();
                let mut denom = 0.0;
                for &g in &s.given {
                    let row = &rows[g as usize];
                    let pos = row.position(e).expect("co-occurring pair has a row entry");
                    let p = row.probs[pos];
                    probs.push(p);
                    positions.push(pos as u32);
                    denom += p;
                }
                ll += denom.ln();
                if want_counts && denom > 0.0 {
                    for ((&g, &pos), &p) in s.given.iter().zip(&positions).zip(&probs) {
                        contributions.push((g, pos, p / denom));
                    }
                }
            }
        }
        (ll, contributions)
    });

    let mut counts: Vec<Vec<f64>> = if want_counts {
        rows.iter().map(|r| vec![0.0; r.probs.len()]).collect()
    } else {
        Vec::new()
    };
    let mut ll = 0.0;
    for (chunk_ll, contributions) in per_chunk {
        ll += chunk_ll;
        for (g, pos, v) in contributions {
            counts[g as usize][pos as usize] += v;
        }
    }
    (ll - normalizer(sentences, has_null), counts)
}

fn normalizer(sentences: &[Sentence], has_null: bool) -> f64 {
    let positions = |s: &Sentence| s.given.len() + usize::from(!has_null);
    sentences
        .iter()
        .map(|s| s.emitted.len() as f64 * (positions(s) as f64).ln())
        .sum()
}

fn maximize(rows: &mut [Row], counts: Vec<Vec<f64>>, exec: Execution) {
    let normalized = exec.map_range(rows.len(), |g| {
        let c = &counts[g];
        let total: f64 = c.iter().sum();
        (total > 0.0).then(|| c.iter().map(|v| v / total).collect::<Vec<f64>>())
    });
    for (row, probs) in rows.iter_mut().zip(normalized) {
        if let Some(p) = probs {
            row.probs = p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Pair, ParallelCorpus};

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::from_pairs(
            pairs
                .iter()
                .map(|(x, z)| {
                    Pair::new(
                        x.split_whitespace().map(str::to_owned).collect(),
                        z.split_whitespace().map(str::to_owned).collect(),
                        None,
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    fn opts(iterations: usize, null: bool) -> Model1Options {
        Model1Options { iterations, null, ..Default::default() }
    }

    #[test]
    fn first_iteration_fixture() {
        let c = corpus(&[("the house", "das haus"), ("house", "haus")]);
        let (t, _) = train_model1(&c, &opts(1, false), Execution::Sequential).unwrap();
        assert!((t.lookup("the", "haus") - 0.25).abs() < 1e-12);
        assert!((t.lookup("house", "haus") - 0.75).abs() < 1e-12);
        assert!((t.lookup("the", "das") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn second_iteration_fixture() {
        let c = corpus(&[("the house", "das haus"), ("house", "haus")]);
        let (t, trace) = train_model1(&c, &opts(2, false), Execution::Sequential).unwrap();
        let expected = 1.6 / (1.6 + 1.0 / 3.0);
        assert!((t.lookup("house", "haus") - expected).abs() < 1e-12);
        assert!(trace.is_non_decreasing(1e-9));
        assert_eq!(trace.log_likelihood.len(), 3);
    }

    #[test]
    fn single_cooccurrence() {
        let c = corpus(&[("a", "b")]);
        let (t, _) = train_model1(&c, &opts(1, false), Execution::Sequential).unwrap();
        assert_eq!(t.lookup("a", "b"), 1.0);
        assert_eq!(t.lookup("zzz", "b"), DEFAULT_FLOOR);
    }

    #[test]
    fn null_participates_and_rows_are_stochastic() {
        let c = corpus(&[("the house", "das haus"), ("house", "haus"), ("the", "das")]);
        let (t, trace) = train_model1(&c, &opts(5, true), Execution::Sequential).unwrap();
        assert!(t.has_null());
        assert!(t.null_prob("the") > DEFAULT_FLOOR);
        for g in t.given_tokens() {
            let sum: f64 = t.row(g).iter().map(|r| r.1).sum();
            assert!((sum - 1.0).abs() < 1e-9, "{g}: {sum}");
        }
        assert!(trace.is_non_decreasing(1e-9));
    }

    #[test]
    fn likelihood_with_floor() {
        let c = corpus(&[("a", "b")]);
        let (t, _) = train_model1(&c, &opts(1, false), Execution::Sequential).unwrap();
        // NULL disabled: the NULL term is absent, so 1 exactly.
        assert_eq!(t.sentence_likelihood(&["a"], &["b"], false), 1.0);
        assert_eq!(t.sentence_likelihood(&["a"], &["b"], true), 0.5);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut pairs = Vec::new();
        for i in 0..700 {
            pairs.push((format!("w{} w{} x{}", i % 7, i % 11, i % 3), format!("z{} z{}", i % 5, i % 13)));
        }
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let c = corpus(&refs);
        let (a, ta) = train_model1(&c, &opts(4, true), Execution::Sequential).unwrap();
        let (b, tb) = train_model1(&c, &opts(4, true), Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn table_file_round_trip() {
        let c = corpus(&[("the house", "das haus"), ("house", "haus")]);
        let (model, _, _) = train_lexical_model(&c, &opts(3, true), Execution::Sequential).unwrap();
        let text = model.to_text();
        let tables = TranslationTable::parse_many(&text, Path::new("t")).unwrap();
        assert_eq!(tables.len(), 2);
        assert_eq!(tables[0], model.forward);
        assert_eq!(tables[1], model.inverse);
        assert!((model.inverse.lookup("house", "haus") - model.inverse.prob("haus", "house")).abs() == 0.0);
    }

    #[test]
    fn rejects_empty_corpus() {
        assert!(train_model1(&ParallelCorpus::default(), &opts(1, true), Execution::Sequential).is_err());
    }
}
