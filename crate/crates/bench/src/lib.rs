//! Fixtures shared by the benchmarks.

use droplstm::data::toy::{markov_text, MarkovSpec};
use droplstm::data::{corpus_from_text, TokenId};
use droplstm::train::init_params;
use droplstm::{ModelParams, Vocabulary};

/// A randomly initialized model of the given size.
pub fn model(vocab: usize, hidden: usize, layers: usize) -> ModelParams {
    init_params(vocab, hidden, layers, 0.1, 7).expect("valid model dimensions")
}

/// A synthetic corpus of `tokens` words and its vocabulary.
pub fn corpus(tokens: usize, words: usize) -> (Vec<TokenId>, Vocabulary) {
    let spec = MarkovSpec {
        words,
        ..MarkovSpec::default()
    };
    let text = markov_text(11, &spec, tokens);
    corpus_from_text(&text, None, words + 2).expect("non-empty corpus")
}
