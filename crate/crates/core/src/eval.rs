//! Exact-match ranking metrics and dataset splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bpe::join_pieces;
use crate::corpus::{language_of_token, ParallelCorpus};
use crate::error::{Error, Result};

/// How sequences are brought to a common form before comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Normalization {
    /// Drop a leading language token.
    pub strip_language: bool,
    /// Undo subword splitting.
    pub join_subwords: bool,
}

impl Normalization {
    pub fn apply(&self, seq: &[String]) -> Vec<String> {
        let body = match seq.split_first() {
            Some((first, rest)) if self.strip_language && language_of_token(first).is_some() => rest,
            _ => seq,
        };
        if self.join_subwords {
            join_pieces(body)
        } else {
            body.to_vec()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub input: Vec<String>,
    pub gold: Vec<String>,
    /// Ranked system outputs, best first.
    pub outputs: Vec<Vec<String>>,
    pub tag: Option<String>,
    pub k_requested: usize,
    /// Whether every output is accepted by the graph, when known.
    pub well_formed: Option<bool>,
    /// 1-based rank of the first output equal to the gold sequence.
    pub matched_rank: Option<usize>,
}

impl EvalRecord {
    pub fn new(
        input: Vec<String>,
        gold: Vec<String>,
        outputs: Vec<Vec<String>>,
        tag: Option<String>,
        k_requested: usize,
        norm: Normalization,
    ) -> Self {
        let want = norm.apply(&gold);
        let matched_rank = outputs.iter().position(|o| norm.apply(o) == want).map(|i| i + 1);
        EvalRecord { input, gold, outputs, tag, k_requested, well_formed: None, matched_rank }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub acc_at_1: f64,
    /// Absent when some list was requested with fewer than 10 entries.
    pub acc_at_10: Option<f64>,
    pub mrr: f64,
    /// Over records whose well-formedness is known.
    pub well_formed_rate: Option<f64>,
    pub per_tag: BTreeMap<String, EvalSummary>,
}

fn summarize(records: &[&EvalRecord]) -> EvalSummary {
    let n = records.len();
    let hits_within = |r: usize| records.iter().filter(|x| x.matched_rank.is_some_and(|m| m <= r)).count();
    let mrr = records
        .iter()
        .map(|x| x.matched_rank.map_or(0.0, |m| 1.0 / m as f64))
        .sum::<f64>()
        / n as f64;
    let known: Vec<bool> = records.iter().filter_map(|x| x.well_formed).collect();
    EvalSummary {
        n,
        acc_at_1: hits_within(1) as f64 / n as f64,
        acc_at_10: records
            .iter()
            .all(|x| x.k_requested >= 10)
            .then(|| hits_within(10) as f64 / n as f64),
        mrr,
        well_formed_rate: (!known.is_empty())
            .then(|| known.iter().filter(|&&w| w).count() as f64 / known.len() as f64),
        per_tag: BTreeMap::new(),
    }
}

pub fn evaluate(records: &[EvalRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to evaluate".into()));
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let mut summary = summarize(&all);
    let mut by_tag: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(t) = &r.tag {
            by_tag.entry(t).or_default().push(r);
        }
    }
    summary.per_tag = by_tag
        .into_iter()
        .map(|(t, rs)| (t.to_owned(), summarize(&rs)))
        .collect();
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"))
}

impl EvalSummary {
    /// `metric<TAB>value` lines; per-tag metrics are suffixed with `[tag]`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        self.write_key_values(&mut out, "");
        for (tag, s) in &self.per_tag {
            s.write_key_values(&mut out, &format!("[{tag}]"));
        }
        out
    }

    fn write_key_values(&self, out: &mut String, suffix: &str) {
        let _ = writeln!(out, "n{suffix}\t{}", self.n);
        let _ = writeln!(out, "acc@1{suffix}\t{}", self.acc_at_1);
        if let Some(a) = self.acc_at_10 {
            let _ = writeln!(out, "acc@10{suffix}\t{a}");
        }
        let _ = writeln!(out, "mrr{suffix}\t{}", self.mrr);
        if let Some(w) = self.well_formed_rate {
            let _ = writeln!(out, "well_formed{suffix}\t{w}");
        }
    }

    /// Fixed-width table, one row for the whole set and one per tag.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>6} {:>8} {:>8} {:>8} {:>11}", "set", "n", "Acc@1", "Acc@10", "MRR", "well-formed");
        let mut row = |name: &str, s: &EvalSummary| {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>8.4} {:>8} {:>8.4} {:>11}",
                name,
                s.n,
                s.acc_at_1,
                fmt_opt(s.acc_at_10),
                s.mrr,
                fmt_opt(s.well_formed_rate)
            );
        };
        row("all", self);
        for (tag, s) in &self.per_tag {
            row(tag, s);
        }
        out
    }
}

/// Shuffles `corpus` with `seed` and cuts it into train, dev and test parts.
/// Part sizes are the rounded fractions; the test part takes the remainder.
pub fn split_dataset(
    corpus: &ParallelCorpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidInput("split fractions must lie in [0, 1]".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("split fractions must sum to 1".into()));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
    let part = |idx: &[usize]| ParallelCorpus::from_pairs(idx.iter().map(|&i| corpus.pairs[i].clone()).collect());
    Ok((
        part(&order[..n_train]),
        part(&order[n_train..n_train + n_dev]),
        part(&order[n_train + n_dev..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Pair;

    fn ranked(rank: Option<usize>, tag: Option<&str>) -> EvalRecord {
        EvalRecord {
            input: vec![],
            gold: vec![],
            outputs: vec![],
            tag: tag.map(str::to_owned),
            k_requested: 10,
            well_formed: Some(true),
            matched_rank: rank,
        }
    }

    #[test]
    fn perfect_run() {
        let s = evaluate(&[ranked(Some(1), None), ranked(Some(1), None)]).unwrap();
        assert_eq!((s.acc_at_1, s.acc_at_10, s.mrr), (1.0, Some(1.0), 1.0));
    }

    #[test]
    fn reciprocal_ranks() {
        let s = evaluate(&[ranked(Some(1), None), ranked(Some(2), None), ranked(Some(4), None)]).unwrap();
        assert!((s.mrr - 0.583_333_333_333_333_3).abs() < 1e-12);
        assert!((s.acc_at_1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn misses_and_tags() {
        let s = evaluate(&[ranked(None, Some("C")), ranked(Some(11), Some("C")), ranked(Some(3), Some("Go"))]).unwrap();
        assert_eq!(s.acc_at_10, Some(1.0 / 3.0));
        assert_eq!(s.per_tag["C"].n, 2);
        assert_eq!(s.per_tag["C"].mrr, 1.0 / 22.0);
        assert!(s.to_key_values().contains("mrr[Go]\t"));
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn matching_ignores_language_token_and_subwords() {
        let t = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        let norm = Normalization { strip_language: true, join_subwords: true };
        let r = EvalRecord::new(t("q"), t("2C ce il</w> x</w>"), vec![t("ceil</w>"), t("ceil</w> x</w>")], Some("C".into()), 2, norm);
        assert_eq!(r.matched_rank, Some(2));
    }

    #[test]
    fn splits() {
        let corpus = ParallelCorpus::from_pairs(
            (0..23)
                .map(|i| Pair::new(vec![format!("w{i}")], vec![format!("c{i}")], None).unwrap())
                .collect(),
        );
        let (tr, dv, te) = split_dataset(&corpus, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (14, 5, 4));
        assert_eq!(split_dataset(&corpus, (0.6, 0.2, 0.2), 5).unwrap().0, tr);
        let (_, _, te) = split_dataset(&corpus, (1.0, 0.0, 0.0), 5).unwrap();
        assert!(te.is_empty());
        assert!(split_dataset(&corpus, (1.2, -0.2, 0.0), 5).is_err());
        assert!(split_dataset(&corpus, (0.5, 0.2, 0.2), 5).is_err());
    }
}
