//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use droplstm::data::toy::{copy_pairs, markov_splits, MarkovSpec};
use droplstm::data::{build_pair_vocab, concat_pairs, corpus_from_text, encode_text, TokenId};
use droplstm::model::{embed, forward_logits, forward_sequence, regularized_step, LstmState, NoDropout, StateVars};
use droplstm::tape::log_sum_exp;
use droplstm::train::{train, Discard, TrainConfig};
use droplstm::{Dropout, ModelParams, Regularizer, Tape, Tensor, Var, Vocabulary};

/// `|a - f| / max(1e-8, |a| + |f|)`.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / (a.abs() + f.abs()).max(1e-8)
}

/// Per-token cross-entropies of one window.
pub fn window_token_losses<R: Regularizer>(
    params: &ModelParams,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    init: &LstmState,
    reg: &mut R,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let sv = init.bind(&mut tape);
    let out = forward_sequence(&mut tape, &bound, inputs, targets, batch, sv, reg).unwrap();
    tape.value(out.losses).to_vec()
}

/// Central differences of the summed loss with respect to every parameter,
/// in [`ModelParams::tensors`] order.
///
/// `terms` returns the loss as a list of summands; the differences are taken
/// term by term before summing, which keeps cancellation error at the level
/// of a single term rather than of the total.
pub fn finite_difference_grads(
    params: &ModelParams,
    step: f64,
    mut terms: impl FnMut(&ModelParams) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let mut g = vec![0.0; size];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.tensors()[k].data()[i];
            probe.tensors_mut()[k].data_mut()[i] = orig + step;
            let up = terms(&probe);
            probe.tensors_mut()[k].data_mut()[i] = orig - step;
            let down = terms(&probe);
            probe.tensors_mut()[k].data_mut()[i] = orig;
            *gi = up.iter().zip(&down).map(|(u, d)| u - d).sum::<f64>() / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// A deterministic non-zero carry-in state.
pub fn patterned_state(layers: usize, batch: usize, n: usize) -> LstmState {
    let fill = |k: usize| {
        Tensor::new(
            &[batch, n],
            (0..batch * n)
                .map(|i| (((i + 3 * k) * 37 % 19) as f64 - 9.0) / 20.0)
                .collect(),
        )
        .unwrap()
    };
    LstmState {
        h: (0..layers).map(fill).collect(),
        c: (0..layers).map(|k| fill(k + 11)).collect(),
    }
}

/// Log-probability of `continuation` after `prefix`, scored with one unrolled
/// pass over the whole sequence.
pub fn unrolled_log_prob(params: &ModelParams, prefix: &[usize], continuation: &[usize]) -> f64 {
    let seq: Vec<usize> = prefix.iter().chain(continuation).copied().collect();
    let inputs = &seq[..seq.len() - 1];
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let init = LstmState::for_model(params, 1).bind(&mut tape);
    let out = forward_logits(&mut tape, &bound, inputs, 1, init, &mut NoDropout).unwrap();
    let v = params.vocab_size();
    let logits = tape.value(out.logits);
    let mut total = 0.0;
    for (j, &tok) in continuation.iter().enumerate() {
        let row = &logits[(prefix.len() - 1 + j) * v..][..v];
        total += row[tok] - log_sum_exp(row);
    }
    total
}

/// Best `<eos>`-terminated continuation of at most `max_len` tokens, by brute
/// force over every sequence. Ties go to the lexicographically smaller one.
pub fn exhaustive_best(params: &ModelParams, prefix: &[usize], max_len: usize, eos: usize) -> (Vec<usize>, f64) {
    let v = params.vocab_size();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for tok in 0..v {
                let mut s = seq.clone();
                s.push(tok);
                if tok == eos {
                    let lp = unrolled_log_prob(params, prefix, &s);
                    let better = match &best {
                        None => true,
                        Some((bs, bl)) => lp > *bl || (lp == *bl && s < *bs),
                    };
                    if better {
                        best = Some((s, lp));
                    }
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    best.expect("max_len >= 1")
}

/// Per-token NLL of one stream, evaluated one token at a time (`B = 1`, `T = 1`).
pub fn stepwise_nlls(params: &ModelParams, stream: &[TokenId]) -> Vec<f64> {
    let mut state = LstmState::for_model(params, 1);
    let mut out = Vec::with_capacity(stream.len().saturating_sub(1));
    for pair in stream.windows(2) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let sv = state.bind(&mut tape);
        let r = forward_sequence(&mut tape, &bound, &pair[..1], &pair[1..], 1, sv, &mut NoDropout).unwrap();
        out.push(tape.value(r.losses)[0]);
        state = LstmState::from_vars(&tape, &r.final_state);
    }
    out
}

/// Word-level train/validation text from one Markov chain with a Zipfian
/// vocabulary of `words` types.
pub struct DeskCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<TokenId>,
    pub valid: Vec<TokenId>,
}

pub fn desk_corpus(words: usize, train_tokens: usize, valid_tokens: usize) -> DeskCorpus {
    let spec = MarkovSpec {
        words,
        ..MarkovSpec::default()
    };
    let parts = markov_splits(1, &spec, &[train_tokens, valid_tokens]);
    let (train, vocab) = corpus_from_text(&parts[0], None, 10_000).unwrap();
    let valid = encode_text(&parts[1], &vocab);
    DeskCorpus { vocab, train, valid }
}

/// A copy-task language model over `<eos> <unk> <sep> w0 w1` (V = 5), trained
/// on sources of one to three words. Decode with the prefix
/// `<eos> source <sep>`, as every pair follows an `<eos>` in training.
pub fn copy_task_model() -> (ModelParams, Vocabulary) {
    let (src, tgt) = copy_pairs(5, 2, 400, 3);
    let src: Vec<&str> = src.iter().map(String::as_str).collect();
    let tgt: Vec<&str> = tgt.iter().map(String::as_str).collect();
    let vocab = build_pair_vocab(&src, &tgt, 100).unwrap();
    let tokens = concat_pairs(&src, &tgt, &vocab).unwrap();
    let cfg = TrainConfig {
        hidden: 16,
        layers: 2,
        unroll: 10,
        batch_size: 4,
        init_range: 0.1,
        dropout: 0.0,
        lr: 1.0,
        decay_start_epoch: 50,
        decay_factor: 2.0,
        epochs: 80,
        clip: 5.0,
        seed: 3,
    };
    let out = train(&cfg, vocab.len(), &tokens, None, &mut Discard).unwrap();
    (out.params, vocab)
}

/// Embedded inputs, outputs and states of a batch-1 regularized unroll.
pub struct Unrolled {
    pub inputs: Vec<Var>,
    pub outputs: Vec<Var>,
    pub states: Vec<StateVars>,
}

/// Runs `steps` timesteps of token `t mod V` through the full stack.
pub fn unroll<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, steps: usize, drop: &mut Dropout) -> Unrolled {
    let bound = params.bind(tape);
    let mut state = LstmState::for_model(params, 1).bind(tape);
    let mut out = Unrolled {
        inputs: Vec::new(),
        outputs: Vec::new(),
        states: Vec::new(),
    };
    for t in 0..steps {
        let x = embed(tape, &bound, &[t % params.vocab_size()]).unwrap();
        let (y, next) = regularized_step(tape, x, &state, &bound, drop).unwrap();
        out.inputs.push(x);
        out.outputs.push(y);
        out.states.push(next.clone());
        state = next;
    }
    out
}
