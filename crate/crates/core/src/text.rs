//! Tokenisation shared by the lexicon scorer, the bag-of-words embedder and
//! the evaluation metrics: whitespace split, case folding, and removal of
//! every character that is not alphanumeric.

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

/// Lower-cased, punctuation-free word tokens. Tokens that become empty are dropped.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// A set of toxic word stems. A token matches when it starts with a stem.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    stems: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, S>(stems: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let stems = stems
            .into_iter()
            .flat_map(|s| normalized_tokens(s.as_ref()))
            .collect();
        Self { stems }
    }

    /// Parses the lexicon file format: UTF-8, one stem per line, `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(|l| match l.find('#') {
            Some(i) => &l[..i],
            None => l,
        }))
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.stems.iter().map(String::as_str)
    }

    /// `token` must already be normalised.
    pub fn matches(&self, token: &str) -> bool {
        // Stems sorting at or before `token` are the only possible prefixes.
        self.stems
            .range::<str, _>((std::ops::Bound::Unbounded, std::ops::Bound::Included(token)))
            .rev()
            .take_while(|s| s.chars().next() == token.chars().next())
            .any(|s| token.starts_with(s.as_str()))
    }

    /// (matched tokens, total tokens) over the normalised tokens of `text`.
    pub fn count_hits(&self, text: &str) -> (usize, usize) {
        let tokens = normalized_tokens(text);
        let hits = tokens.iter().filter(|t| self.matches(t)).count();
        (hits, tokens.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation() {
        assert_eq!(
            normalized_tokens("  Don't YELL, ok?! -- "),
            vec!["dont", "yell", "ok"]
        );
        assert!(normalized_tokens("").is_empty());
    }

    #[test]
    fn lexicon_file_format() {
        let lex = Lexicon::parse("# header\nidiot\n  Stupid  # trailing\n\n");
        assert_eq!(lex.stems().collect::<Vec<_>>(), vec!["idiot", "stupid"]);
    }

    #[test]
    fn prefix_matching() {
        let lex = Lexicon::new(["fuck", "hate", "ass"]);
        assert!(lex.matches("fucking"));
        assert!(lex.matches("hate"));
        assert!(lex.matches("hateful"));
        assert!(!lex.matches("hat"));
        assert!(lex.matches("assume"));
        assert!(!lex.matches("bass"));
        assert_eq!(lex.count_hits("I HATE you, fuckers."), (2, 4));
    }
}
