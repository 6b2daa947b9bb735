//! Seeded synthetic corpora for smoke tests and desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameters of [`markov_text`].
#[derive(Clone, Debug)]
pub struct MarkovSpec {
    /// Number of distinct word types.
    pub words: usize,
    /// Successors preferred by each word.
    pub successors: usize,
    /// Probability of following a preferred successor instead of the
    /// background unigram distribution.
    pub stickiness: f64,
    /// Probability that a sentence ends after each word.
    pub end_prob: f64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        MarkovSpec {
            words: 50,
            successors: 3,
            stickiness: 0.8,
            end_prob: 0.08,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn zipf_cdf(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (0..n)
        .map(|r| {
            acc += 1.0 / (r as f64 + 1.0);
            acc
        })
        .collect();
    let total = acc;
    cdf.iter_mut().for_each(|c| *c /= total);
    cdf
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Text from a first-order Markov chain over `w0..w{words-1}` with a Zipfian
/// background distribution, exactly `tokens` words long, one sentence per line.
pub fn markov_text(seed: u64, spec: &MarkovSpec, tokens: usize) -> String {
    markov_splits(seed, spec, &[tokens]).remove(0)
}

/// Consecutive pieces of one chain, e.g. train and validation text drawn from
/// the same language. Piece `i` holds exactly `sizes[i]` words.
pub fn markov_splits(seed: u64, spec: &MarkovSpec, sizes: &[usize]) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf = zipf_cdf(spec.words);
    let table: Vec<Vec<usize>> = (0..spec.words)
        .map(|_| (0..spec.successors).map(|_| draw(&cdf, rng.random())).collect())
        .collect();
    let mut prev = draw(&cdf, rng.random());
    sizes
        .iter()
        .map(|&tokens| {
            let mut out = String::new();
            let mut emitted = 0;
            while emitted < tokens {
                let mut line = Vec::new();
                loop {
                    let next = if rng.random::<f64>() < spec.stickiness {
                        table[prev][rng.random_range(0..spec.successors)]
                    } else {
                        draw(&cdf, rng.random())
                    };
                    line.push(word(next));
                    prev = next;
                    emitted += 1;
                    if emitted >= tokens || rng.random::<f64>() < spec.end_prob {
                        break;
                    }
                }
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out
        })
        .collect()
}

/// Source/target pairs of a copy task: each target equals its source.
pub fn copy_pairs(seed: u64, words: usize, pairs: usize, max_len: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<String> = (0..pairs)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len)
                .map(|_| word(rng.random_range(0..words)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    (src.clone(), src)
}
