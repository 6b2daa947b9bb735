//! Locating and tokenizing the splits of a data directory.

use std::path::{Path, PathBuf};

use droplstm::data::toy::{markov_splits, MarkovSpec};
use droplstm::data::{build_pair_vocab, concat_pairs, encode_text, read_text, TokenId, Vocabulary};
use droplstm::{CorpusMode, Error, Result};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// `{split}.txt` if present, else the Penn Treebank name `ptb.{split}.txt`.
pub fn text_path(dir: &Path, split: &str) -> PathBuf {
    let plain = dir.join(format!("{split}.txt"));
    if plain.exists() {
        plain
    } else {
        dir.join(format!("ptb.{split}.txt"))
    }
}

fn pair_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.src")), dir.join(format!("{split}.tgt")))
}

pub fn split_exists(dir: &Path, split: &str, mode: CorpusMode) -> bool {
    match mode {
        CorpusMode::Language => text_path(dir, split).exists(),
        CorpusMode::Translation => pair_paths(dir, split).0.exists(),
    }
}

/// Raw text of a split: one string for language modeling, aligned
/// source/target lines for translation.
pub enum SplitText {
    Language(String),
    Translation(Vec<String>, Vec<String>),
}

impl SplitText {
    pub fn read(dir: &Path, split: &str, mode: CorpusMode) -> Result<Self> {
        match mode {
            CorpusMode::Language => Ok(SplitText::Language(read_text(&text_path(dir, split))?)),
            CorpusMode::Translation => {
                let (src, tgt) = pair_paths(dir, split);
                let lines = |p: &Path| -> Result<Vec<String>> { Ok(read_text(p)?.lines().map(String::from).collect()) };
                Ok(SplitText::Translation(lines(&src)?, lines(&tgt)?))
            }
        }
    }

    pub fn build_vocab(&self, cap: usize) -> Result<Vocabulary> {
        match self {
            SplitText::Language(text) => Vocabulary::build(text.lines(), cap, false),
            SplitText::Translation(src, tgt) => build_pair_vocab(&refs(src), &refs(tgt), cap),
        }
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        match self {
            SplitText::Language(text) => Ok(encode_text(text, vocab)),
            SplitText::Translation(src, tgt) => concat_pairs(&refs(src), &refs(tgt), vocab),
        }
    }
}

fn refs(lines: &[String]) -> Vec<&str> {
    lines.iter().map(String::as_str).collect()
}

/// Parses token counts such as `1000`, `1k` or `2m`.
pub fn parse_count(s: &str) -> std::result::Result<usize, String> {
    let lower = s.trim().to_ascii_lowercase();
    let (digits, scale) = match lower.strip_suffix('k') {
        Some(d) => (d, 1_000),
        None => match lower.strip_suffix('m') {
            Some(d) => (d, 1_000_000),
            None => (lower.as_str(), 1),
        },
    };
    match digits.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n * scale),
        _ => Err(format!("expected a positive token count like 1000 or 1k, got {s:?}")),
    }
}

/// Synthetic training text of `tokens` words and validation text a tenth that
/// size, from one fixed chain. Sentence ends add tokens on encoding, so
/// callers truncate to the exact size.
pub fn toy_text(tokens: usize) -> (String, String) {
    let valid = (tokens / 10).max(100);
    let mut parts = markov_splits(1, &MarkovSpec::default(), &[tokens, valid]);
    let valid_text = parts.pop().unwrap_or_default();
    (parts.pop().unwrap_or_default(), valid_text)
}

/// Keeps the first `n` tokens.
pub fn truncated(mut tokens: Vec<TokenId>, n: usize) -> Vec<TokenId> {
    tokens.truncate(n);
    tokens
}

pub fn missing(what: &str, path: &Path) -> Error {
    Error::Usage(format!("{what} not found: {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_accept_suffixes() {
        assert_eq!(parse_count("1k"), Ok(1000));
        assert_eq!(parse_count("50K"), Ok(50_000));
        assert_eq!(parse_count("2m"), Ok(2_000_000));
        assert_eq!(parse_count("750"), Ok(750));
        assert!(parse_count("0").is_err());
        assert!(parse_count("k").is_err());
        assert!(parse_count("-3").is_err());
    }

    #[test]
    fn ptb_names_are_a_fallback() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(text_path(tmp.path(), "valid"), tmp.path().join("ptb.valid.txt"));
        std::fs::write(tmp.path().join("valid.txt"), "a\n").unwrap();
        assert_eq!(text_path(tmp.path(), "valid"), tmp.path().join("valid.txt"));
    }

    #[test]
    fn toy_text_has_the_requested_size() {
        let (train, valid) = toy_text(1000);
        assert_eq!(train.split_whitespace().count(), 1000);
        assert_eq!(valid.split_whitespace().count(), 100);
    }
}
