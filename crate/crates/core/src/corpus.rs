//! Parallel text/component corpora.
//!
//! A corpus file is UTF-8 with one pair per line: `source TAB target [TAB tag]`.
//! Both sides are split on whitespace. When a language tag is attached, the
//! artificial token `2<tag>` is prepended to the target sequence so that the
//! automaton and the scorers see the output language as the first output token.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Prefix of the artificial language-identifier tokens.
pub const LANGUAGE_PREFIX: &str = "2";

/// Where a pair's language tag comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TagMode {
    #[default]
    None,
    /// Third tab-separated column.
    FromColumn,
    /// File stem of the corpus file, applied to every line.
    FromFilename,
}

/// One text / component-sequence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<String>,
    /// Component tokens. Starts with the language token when `tag` is set.
    pub target: Vec<String>,
    pub tag: Option<String>,
}

impl Pair {
    /// Builds a pair, prepending the language token for `tag`.
    pub fn new(source: Vec<String>, target: Vec<String>, tag: Option<String>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidInput("pair with an empty side".into()));
        }
        let target = match &tag {
            Some(name) => {
                let mut t = Vec::with_capacity(target.len() + 1);
                t.push(make_language_token(name)?);
                t.extend(target);
                t
            }
            None => target,
        };
        Ok(Pair { source, target, tag })
    }

    /// Target tokens with the language token removed.
    pub fn component(&self) -> &[String] {
        if self.tag.is_some() {
            &self.target[1..]
        } else {
            &self.target
        }
    }
}

/// An ordered collection of pairs with its vocabularies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub source_vocab: BTreeSet<String>,
    pub target_vocab: BTreeSet<String>,
}

impl ParallelCorpus {
    pub fn from_pairs(pairs: Vec<Pair>) -> Self {
        let mut corpus = ParallelCorpus::default();
        for pair in pairs {
            corpus.push(pair);
        }
        corpus
    }

    pub fn push(&mut self, pair: Pair) {
        self.source_vocab.extend(pair.source.iter().cloned());
        self.target_vocab.extend(pair.target.iter().cloned());
        self.pairs.push(pair);
    }

    /// Concatenates corpora in order.
    pub fn concat(corpora: impl IntoIterator<Item = ParallelCorpus>) -> Self {
        let mut out = ParallelCorpus::default();
        for c in corpora {
            for p in c.pairs {
                out.push(p);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The distinct target sequences, in first-seen order.
    pub fn target_sequences(&self) -> Vec<Vec<String>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            if seen.insert(&p.target) {
                out.push(p.target.clone());
            }
        }
        out
    }

    /// Distinct language tags present, sorted.
    pub fn tags(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.pairs.iter().filter_map(|p| p.tag.as_ref()).collect();
        set.into_iter().cloned().collect()
    }
}

/// Returns the artificial output-language token for `name`, e.g. `C` -> `2C`.
pub fn make_language_token(name: &str) -> Result<String> {
    if name.is_empty() {
        return Err(Error::InvalidInput("empty language name".into()));
    }
    if name.chars().any(char::is_whitespace) {
        return Err(Error::InvalidInput(format!(
            "language name `{name}` contains whitespace"
        )));
    }
    Ok(format!("{LANGUAGE_PREFIX}{name}"))
}

/// Inverse of [`make_language_token`] for tokens that look like one.
pub fn language_of_token(token: &str) -> Option<&str> {
    token
        .strip_prefix(LANGUAGE_PREFIX)
        .filter(|rest| !rest.is_empty())
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Parses corpus text. `path` is only used for error messages and for
/// [`TagMode::FromFilename`].
pub fn parse_corpus(text: &str, path: &Path, tag_mode: TagMode) -> Result<ParallelCorpus> {
    let file_tag = match tag_mode {
        TagMode::FromFilename => {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::parse(path, 0, "cannot derive a tag from the file name"))?;
            Some(stem.to_owned())
        }
        _ => None,
    };

    let mut corpus = ParallelCorpus::default();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        let source = tokenize(cols[0]);
        let target = tokenize(cols[1]);
        if source.is_empty() || target.is_empty() {
            return Err(Error::parse(path, lineno, "empty source or target"));
        }
        let tag = match tag_mode {
            TagMode::None => None,
            TagMode::FromFilename => file_tag.clone(),
            TagMode::FromColumn => {
                let tag = cols.get(2).map(|s| s.trim()).unwrap_or("");
                if tag.is_empty() {
                    return Err(Error::parse(path, lineno, "missing language tag column"));
                }
                Some(tag.to_owned())
            }
        };
        let pair = Pair::new(source, target, tag).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        corpus.push(pair);
    }
    if corpus.is_empty() {
        return Err(Error::parse(path, 0, "corpus is empty"));
    }
    Ok(corpus)
}

/// Reads and tokenizes a corpus file.
pub fn load_corpus(path: impl AsRef<Path>, tag_mode: TagMode) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, tag_mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, mode: TagMode) -> Result<ParallelCorpus> {
        parse_corpus(text, Path::new("mem.tsv"), mode)
    }

    #[test]
    fn tagged_line_gets_language_token() {
        let c = parse("the ceiling of a number\tnumeric math ceil arg\tC\n", TagMode::FromColumn).unwrap();
        let p = &c.pairs[0];
        assert_eq!(p.source, ["the", "ceiling", "of", "a", "number"]);
        assert_eq!(p.target, ["2C", "numeric", "math", "ceil", "arg"]);
        assert_eq!(p.tag.as_deref(), Some("C"));
        assert_eq!(p.component(), ["numeric", "math", "ceil", "arg"]);
        assert!(c.target_vocab.contains("2C"));
    }

    #[test]
    fn minimal_untagged_pair() {
        let c = parse("a\tb", TagMode::None).unwrap();
        assert_eq!(c.pairs[0].source, ["a"]);
        assert_eq!(c.pairs[0].target, ["b"]);
        assert_eq!(c.pairs[0].tag, None);
    }

    #[test]
    fn vocabularies_are_sets() {
        let c = parse("a b\tc\na b\tc\n", TagMode::None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.source_vocab.iter().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(c.target_vocab.iter().collect::<Vec<_>>(), ["c"]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse("a\tb\nno tab here\n", TagMode::None).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        let err = parse("a\tb\tc\td\n", TagMode::None).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse("", TagMode::None).is_err());
        assert!(parse("\n\n", TagMode::None).is_err());
    }

    #[test]
    fn missing_tag_column() {
        assert!(parse("a\tb\n", TagMode::FromColumn).is_err());
    }

    #[test]
    fn tag_from_filename() {
        let c = parse_corpus("x y\tz\n", Path::new("/data/Clojure.tsv"), TagMode::FromFilename).unwrap();
        assert_eq!(c.pairs[0].target, ["2Clojure", "z"]);
    }

    #[test]
    fn language_tokens() {
        assert_eq!(make_language_token("C").unwrap(), "2C");
        assert_eq!(make_language_token("Clojure").unwrap(), "2Clojure");
        assert!(make_language_token("").is_err());
        assert_eq!(language_of_token("2Clojure"), Some("Clojure"));
        assert_eq!(language_of_token("2"), None);
        assert_eq!(language_of_token("math"), None);
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = std::env::temp_dir().join(format!("polyparse-corpus-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.tsv");
        fs::write(&path, "b a\tx y\tL\nc\tz\tM\n").unwrap();
        let a = load_corpus(&path, TagMode::FromColumn).unwrap();
        let b = load_corpus(&path, TagMode::FromColumn).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tags(), ["L", "M"]);
        fs::remove_dir_all(&dir).ok();
    }
}
