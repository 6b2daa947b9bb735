//! Corpus ingestion, vocabularies and continuous batching.
//!
//! Text is whitespace-tokenized with one sentence per line; every line ends
//! with an `<eos>` token. A batched corpus splits the token stream into `B`
//! contiguous columns so that successive windows continue each column where
//! the previous window stopped.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub mod toy;

pub type TokenId = usize;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";

/// Vocabulary size used when none is given.
pub const DEFAULT_VOCAB_SIZE: usize = 10_000;

/// Bidirectional token/id map.
///
/// Reserved tokens take the lowest ids: `<eos>` = 0, `<unk>` = 1 and, for
/// translation corpora, `<sep>` = 2. The remaining ids follow descending
/// training frequency with ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary of at most `cap` entries (reserved tokens included).
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, cap: usize, with_sep: bool) -> Result<Self> {
        let reserved: &[&str] = if with_sep { &[EOS, UNK, SEP] } else { &[EOS, UNK] };
        if cap < reserved.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} is smaller than the {} reserved tokens",
                reserved.len()
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                if !reserved.contains(&w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = reserved
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(cap)
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Vocabulary with id = position in `tokens`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EOS) || tokens.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Config(format!("vocabulary must start with {EOS} and {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        0
    }

    pub fn unk(&self) -> TokenId {
        1
    }

    pub fn sep(&self) -> Option<TokenId> {
        self.id(SEP)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(self.unk())
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of a line without the trailing `<eos>`.
    pub fn encode_words(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    /// Token ids of a line followed by `<eos>`.
    pub fn encode_line(&self, line: &str) -> Vec<TokenId> {
        let mut ids = self.encode_words(line);
        ids.push(self.eos());
        ids
    }

    /// Space-joined tokens. Unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, id = line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Token ids of `text` (each line followed by `<eos>`).
pub fn encode_text(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    text.lines().flat_map(|l| vocab.encode_line(l)).collect()
}

/// Tokenizes a text, building the vocabulary from it when none is supplied.
pub fn corpus_from_text(text: &str, vocab: Option<&Vocabulary>, cap: usize) -> Result<(Vec<TokenId>, Vocabulary)> {
    if text.split_whitespace().next().is_none() {
        return Err(Error::Usage("corpus is empty".into()));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(text.lines(), cap, false)?,
    };
    Ok((encode_text(text, &vocab), vocab))
}

/// Reads a whitespace-tokenized file, one sentence per line.
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>, cap: usize) -> Result<(Vec<TokenId>, Vocabulary)> {
    let text = read_text(path)?;
    corpus_from_text(&text, vocab, cap).map_err(|e| match e {
        Error::Usage(msg) => Error::Usage(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Vocabulary over both sides of a parallel corpus, with `<sep>` reserved.
pub fn build_pair_vocab(source: &[&str], target: &[&str], cap: usize) -> Result<Vocabulary> {
    Vocabulary::build(source.iter().chain(target).copied(), cap, true)
}

/// Chains `source <sep> target <eos>` for every aligned pair.
pub fn concat_pairs(source: &[&str], target: &[&str], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    if source.len() != target.len() {
        return Err(Error::Usage(format!(
            "parallel corpus has {} source lines but {} target lines",
            source.len(),
            target.len()
        )));
    }
    let sep = vocab
        .sep()
        .ok_or_else(|| Error::Config(format!("vocabulary has no {SEP} token")))?;
    let mut out = Vec::new();
    for (s, t) in source.iter().zip(target) {
        out.extend(vocab.encode_words(s));
        out.push(sep);
        out.extend(vocab.encode_line(t));
    }
    Ok(out)
}

/// Token matrix with `batch` contiguous streams as columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchedCorpus {
    data: Vec<TokenId>,
    rows: usize,
    batch: usize,
}

/// One `T x B` training window, time-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub steps: usize,
}

/// Reshapes `tokens` into `batch` contiguous streams, dropping the remainder.
pub fn batchify(tokens: &[TokenId], batch: usize) -> Result<BatchedCorpus> {
    if batch == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    if tokens.len() < 2 * batch {
        return Err(Error::Usage(format!(
            "{} tokens cannot fill {batch} streams of at least two tokens",
            tokens.len()
        )));
    }
    let rows = tokens.len() / batch;
    let mut data = vec![0; rows * batch];
    for c in 0..batch {
        for r in 0..rows {
            data[r * batch + c] = tokens[c * rows + r];
        }
    }
    Ok(BatchedCorpus { data, rows, batch })
}

impl BatchedCorpus {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn get(&self, row: usize, stream: usize) -> TokenId {
        self.data[row * self.batch + stream]
    }

    pub fn stream(&self, c: usize) -> Vec<TokenId> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn max_id(&self) -> Option<TokenId> {
        self.data.iter().copied().max()
    }

    /// Number of full `unroll`-step windows.
    pub fn num_windows(&self, unroll: usize) -> usize {
        (self.rows - 1).checked_div(unroll).unwrap_or(0)
    }

    fn window(&self, start: usize, steps: usize) -> Window {
        let b = self.batch;
        Window {
            inputs: self.data[start * b..(start + steps) * b].to_vec(),
            targets: self.data[(start + 1) * b..(start + steps + 1) * b].to_vec(),
            steps,
        }
    }

    /// Successive full windows; the last row only ever serves as a target.
    pub fn windows(&self, unroll: usize) -> impl Iterator<Item = Window> + '_ {
        (0..self.num_windows(unroll)).map(move |k| self.window(k * unroll, unroll))
    }

    /// Like [`windows`](Self::windows) plus a final shorter window covering
    /// the leftover rows, so every row after the first is predicted once.
    pub fn windows_with_tail(&self, unroll: usize) -> impl Iterator<Item = Window> + '_ {
        let full = self.num_windows(unroll);
        let covered = full * unroll;
        let tail = self.rows - 1 - covered;
        self.windows(unroll)
            .chain((tail > 0).then(|| self.window(covered, tail)))
    }
}
