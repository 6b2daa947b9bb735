//! Evaluation and decoding with trained models. Dropout is always the
//! identity here and no randomness is consumed except by the sampler's own
//! seeded generator.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchedCorpus, TokenId};
use crate::dd::Dd;
use crate::dropout::Dropout;
use crate::error::{Error, Result};
use crate::model::{embed, forward_logits, regularized_step, LstmState, ModelParams};
use crate::tape::{log_sum_exp, softmax, Tape};

/// Negative log-likelihood totals over a corpus.
///
/// Token NLLs and their mean are kept in double-double precision, so the
/// perplexity is the correctly rounded value of `exp(total / tokens)`; a
/// uniform predictor over `V` words scores exactly `V`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub nll_sum: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    mean: Dd,
}

impl EvalStats {
    pub fn from_nlls(nlls: &[f64]) -> Self {
        Self::from_exact(&nlls.iter().map(|&x| Dd::from(x)).collect::<Vec<_>>())
    }

    fn from_exact(nlls: &[Dd]) -> Self {
        let sum: Dd = nlls.iter().copied().sum();
        let mean = sum / nlls.len() as f64;
        EvalStats {
            nll_sum: sum.to_f64(),
            mean_nll: mean.to_f64(),
            tokens: nlls.len(),
            mean,
        }
    }

    pub fn perplexity(&self) -> f64 {
        self.mean.exp().to_f64()
    }
}

/// Log-probability of each target under `logits` (`[R, V]` row-major).
fn target_log_probs(logits: &[f64], vocab: usize, targets: &[TokenId]) -> Vec<Dd> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            Dd::diff(row[t], m) - Dd::from(z).ln()
        })
        .collect()
}

/// Per-position NLLs of the mixture whose members assign `member_lp[k][r]`.
fn mixture_nll(member_lp: &[Vec<Dd>]) -> Vec<Dd> {
    let ln_k = Dd::from(member_lp.len() as f64).ln();
    (0..member_lp[0].len())
        .map(|r| {
            let m = member_lp.iter().map(|lp| lp[r].hi).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Dd::from(f64::INFINITY);
            }
            let z: Dd = member_lp.iter().map(|lp| (lp[r] - Dd::from(m)).exp()).sum();
            ln_k - Dd::from(m) - z.ln()
        })
        .collect()
}

fn check_members(models: &[&ModelParams]) -> Result<usize> {
    let first = models
        .first()
        .ok_or_else(|| Error::Usage("ensemble needs at least one model".into()))?;
    let v = first.vocab_size();
    if let Some(m) = models.iter().find(|m| m.vocab_size() != v) {
        return Err(Error::Config(format!(
            "ensemble members disagree on vocabulary size ({v} vs {})",
            m.vocab_size()
        )));
    }
    Ok(v)
}

/// Per-token NLL of the probability-averaged ensemble, row `t * B + b` of
/// each window concatenated in window order.
pub fn ensemble_token_nlls(models: &[&ModelParams], corpus: &BatchedCorpus, unroll: usize) -> Result<Vec<f64>> {
    Ok(exact_nlls(models, corpus, unroll)?
        .into_iter()
        .map(Dd::to_f64)
        .collect())
}

fn exact_nlls(models: &[&ModelParams], corpus: &BatchedCorpus, unroll: usize) -> Result<Vec<Dd>> {
    let vocab = check_members(models)?;
    if unroll == 0 {
        return Err(Error::Usage("unroll must be positive".into()));
    }
    if let Some(max) = corpus.max_id().filter(|&m| m >= vocab) {
        return Err(Error::Index {
            what: "token id",
            index: max,
            limit: vocab,
        });
    }
    let batch = corpus.batch();
    let mut states: Vec<LstmState> = models.iter().map(|m| LstmState::for_model(m, batch)).collect();
    let mut out = Vec::new();
    for w in corpus.windows_with_tail(unroll) {
        let mut member_lp = Vec::with_capacity(models.len());
        for (m, state) in models.iter().zip(states.iter_mut()) {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let init = state.bind(&mut tape);
            let fwd = forward_logits(&mut tape, &bound, &w.inputs, batch, init, &mut Dropout::eval())?;
            member_lp.push(target_log_probs(tape.value(fwd.logits), vocab, &w.targets));
            *state = LstmState::from_vars(&tape, &fwd.final_state);
        }
        out.extend(mixture_nll(&member_lp));
    }
    Ok(out)
}

/// Perplexity of the arithmetic mean of the members' predicted distributions;
/// each member carries its own state across windows.
pub fn ensemble_eval(models: &[&ModelParams], corpus: &BatchedCorpus, unroll: usize) -> Result<f64> {
    Ok(EvalStats::from_exact(&exact_nlls(models, corpus, unroll)?).perplexity())
}

/// Per-token NLLs of a single model (see [`ensemble_token_nlls`] for ordering).
pub fn token_nlls(params: &ModelParams, corpus: &BatchedCorpus, unroll: usize) -> Result<Vec<f64>> {
    ensemble_token_nlls(&[params], corpus, unroll)
}

pub fn evaluate(params: &ModelParams, corpus: &BatchedCorpus, unroll: usize) -> Result<EvalStats> {
    Ok(EvalStats::from_exact(&exact_nlls(&[params], corpus, unroll)?))
}

/// `exp(total NLL / predicted tokens)` with states carried across windows.
pub fn perplexity(params: &ModelParams, corpus: &BatchedCorpus, unroll: usize) -> Result<f64> {
    Ok(evaluate(params, corpus, unroll)?.perplexity())
}

/// Mean of the members' softmax distributions for one position.
pub fn ensemble_distribution(member_logits: &[&[f64]]) -> Vec<f64> {
    let k = member_logits.len() as f64;
    let mut acc = vec![0.0; member_logits.first().map_or(0, |l| l.len())];
    for logits in member_logits {
        acc.iter_mut().zip(softmax(logits)).for_each(|(a, p)| *a += p);
    }
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// Runs single eval-mode timesteps for a batch of independent sequences.
struct Stepper<'p> {
    params: &'p ModelParams,
}

impl<'p> Stepper<'p> {
    fn step(&self, state: &LstmState, tokens: &[TokenId]) -> Result<(Vec<Vec<f64>>, LstmState)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let sv = state.bind(&mut tape);
        let x = embed(&mut tape, &bound, tokens)?;
        let (logits, next) = regularized_step(&mut tape, x, &sv, &bound, &mut Dropout::eval())?;
        let v = self.params.vocab_size();
        let rows = tape.value(logits).chunks(v).map(<[f64]>::to_vec).collect();
        Ok((rows, LstmState::from_vars(&tape, &next)))
    }

    /// Feeds `prefix` from a zero state and returns the next-token logits.
    fn prime(&self, prefix: &[TokenId]) -> Result<(Vec<f64>, LstmState)> {
        if prefix.is_empty() {
            return Err(Error::Usage("decoding needs a non-empty prefix".into()));
        }
        let mut state = LstmState::for_model(self.params, 1);
        let mut logits = Vec::new();
        for &t in prefix {
            let (mut rows, next) = self.step(&state, &[t])?;
            logits = rows.swap_remove(0);
            state = next;
        }
        Ok((logits, state))
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub prefix: Vec<TokenId>,
    pub max_len: usize,
    /// Softmax temperature; `0` selects the most probable token.
    pub temperature: f64,
    pub forbidden: BTreeSet<TokenId>,
    pub seed: u64,
    pub eos: TokenId,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.forbidden.contains(&self.eos) {
            return Err(Error::Config("the end-of-sentence token cannot be forbidden".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Next-token distribution with forbidden tokens removed and the remaining
/// mass renormalized.
pub fn filtered_distribution(logits: &[f64], temperature: f64, forbidden: &BTreeSet<TokenId>) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = if temperature > 0.0 {
        logits.iter().map(|z| z / temperature).collect()
    } else {
        logits.to_vec()
    };
    let mut p = softmax(&scaled);
    for &f in forbidden {
        if let Some(v) = p.get_mut(f) {
            *v = 0.0;
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("every token with probability mass is forbidden".into()));
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

fn argmax(p: &[f64]) -> TokenId {
    // First maximum wins, so ties go to the lower id.
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            },
        )
        .0
}

/// Draws a continuation of `cfg.prefix` (the prefix itself is not returned).
/// Generation stops after `max_len` tokens or when `<eos>` is drawn; the
/// `<eos>` is not included.
pub fn sample(params: &ModelParams, cfg: &SamplerConfig) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let stepper = Stepper { params };
    let prefix = if cfg.prefix.is_empty() {
        vec![cfg.eos]
    } else {
        cfg.prefix.clone()
    };
    let (mut logits, mut state) = stepper.prime(&prefix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let p = filtered_distribution(&logits, cfg.temperature, &cfg.forbidden)?;
        let next = if cfg.temperature == 0.0 {
            argmax(&p)
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if pi > 0.0 && u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` a hair below 1; fall back to the last permitted token.
            pick.unwrap_or_else(|| p.iter().rposition(|&v| v > 0.0).unwrap_or(0))
        };
        if next == cfg.eos {
            break;
        }
        out.push(next);
        let (mut rows, next_state) = stepper.step(&state, &[next])?;
        logits = rows.swap_remove(0);
        state = next_state;
    }
    Ok(out)
}

/// A decoded continuation and its total log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Generated tokens, including the final `<eos>` when complete.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// `false` when no hypothesis reached `<eos>` within `max_len`.
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub eos: TokenId,
    /// Rank by mean instead of total log-probability.
    pub length_normalize: bool,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(logits);
    logits.iter().map(|z| z - l).collect()
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

impl Hyp {
    fn rank_score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: &Hyp, b: &Hyp, normalize: bool) -> Ordering {
    b.rank_score(normalize)
        .total_cmp(&a.rank_score(normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over continuations of `prefix`.
///
/// At every step all expansions of the live hypotheses are ranked and the
/// best `width` kept; those ending in `<eos>` are set aside as complete.
/// The search runs until no live hypothesis remains or `max_len` tokens have
/// been generated, then returns the best complete hypothesis.
pub fn beam_search(params: &ModelParams, prefix: &[TokenId], cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.width == 0 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    let stepper = Stepper { params };
    let (logits, state) = stepper.prime(prefix)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut live_logp = vec![log_softmax(&logits)];
    let mut live_state = state;
    let mut complete: Vec<Hyp> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(Hyp, usize)> = Vec::with_capacity(live.len() * live_logp[0].len());
        for (parent, (h, lp)) in live.iter().zip(&live_logp).enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = Vec::with_capacity(h.tokens.len() + 1);
                tokens.extend_from_slice(&h.tokens);
                tokens.push(tok);
                candidates.push((
                    Hyp {
                        tokens,
                        log_prob: h.log_prob + l,
                    },
                    parent,
                ));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0, cfg.length_normalize));
        candidates.truncate(cfg.width);

        let mut next_live = Vec::new();
        let mut parents = Vec::new();
        for (h, parent) in candidates {
            if h.tokens.last() == Some(&cfg.eos) {
                complete.push(h);
            } else {
                parents.push(parent);
                next_live.push(h);
            }
        }
        if next_live.is_empty() {
            live.clear();
            break;
        }
        let last: Vec<TokenId> = next_live.iter().map(|h| *h.tokens.last().unwrap()).collect();
        let (rows, next_state) = stepper.step(&live_state.select_rows(&parents), &last)?;
        live_logp = rows.iter().map(|r| log_softmax(r)).collect();
        live_state = next_state;
        live = next_live;
    }

    let (pool, is_complete) = if complete.is_empty() {
        (live, false)
    } else {
        (complete, true)
    };
    let best = pool
        .into_iter()
        .min_by(|a, b| rank(a, b, cfg.length_normalize))
        .ok_or_else(|| Error::Usage("beam search generated nothing (max_len = 0)".into()))?;
    Ok(BeamResult {
        tokens: best.tokens,
        log_prob: best.log_prob,
        complete: is_complete,
    })
}

/// Picks the most probable token at every step.
pub fn greedy_decode(params: &ModelParams, prefix: &[TokenId], max_len: usize, eos: TokenId) -> Result<BeamResult> {
    let stepper = Stepper { params };
    let (mut logits, mut state) = stepper.prime(prefix)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let lp = log_softmax(&logits);
        let next = argmax(&lp);
        log_prob += lp[next];
        tokens.push(next);
        if next == eos {
            return Ok(BeamResult {
                tokens,
                log_prob,
                complete: true,
            });
        }
        let (mut rows, s) = stepper.step(&state, &[next])?;
        logits = rows.swap_remove(0);
        state = s;
    }
    Ok(BeamResult {
        tokens,
        log_prob,
        complete: false,
    })
}

/// Total log-probability of `continuation` after `prefix`, one step at a time.
pub fn sequence_log_prob(params: &ModelParams, prefix: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    let stepper = Stepper { params };
    let (mut logits, mut state) = stepper.prime(prefix)?;
    let mut total = 0.0;
    for (i, &t) in continuation.iter().enumerate() {
        total += log_softmax(&logits)[t];
        if i + 1 < continuation.len() {
            let (mut rows, s) = stepper.step(&state, &[t])?;
            logits = rows.swap_remove(0);
            state = s;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::batchify;
    use crate::train::init_params;

    #[test]
    fn zero_head_perplexity_is_vocab_size() {
        let mut p = init_params(17, 6, 2, 0.3, 1).unwrap();
        p.output_w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let tokens: Vec<usize> = (0..200).map(|i| (i * 7) % 17).collect();
        let corpus = batchify(&tokens, 4).unwrap();
        let ppl = perplexity(&p, &corpus, 5).unwrap();
        assert!((ppl - 17.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn ensemble_of_one_is_identical_and_clones_agree() {
        let p = init_params(11, 5, 2, 0.5, 3).unwrap();
        let tokens: Vec<usize> = (0..150).map(|i| (i * i + 3) % 11).collect();
        let corpus = batchify(&tokens, 3).unwrap();
        let single = perplexity(&p, &corpus, 4).unwrap();
        assert_eq!(ensemble_eval(&[&p], &corpus, 4).unwrap(), single);
        let clones = ensemble_eval(&[&p, &p, &p], &corpus, 4).unwrap();
        assert!((clones - single).abs() < 1e-9);
    }

    #[test]
    fn ensemble_rejects_mismatched_vocab() {
        let a = init_params(11, 5, 1, 0.5, 3).unwrap();
        let b = init_params(12, 5, 1, 0.5, 3).unwrap();
        let corpus = batchify(&[1, 2, 3, 4, 5, 6], 1).unwrap();
        assert!(matches!(ensemble_eval(&[&a, &b], &corpus, 2), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_distribution_sums_to_one() {
        let a = [0.3, -2.0, 5.0, 1.0];
        let b = [10.0, 0.0, -1.0, 2.0];
        let p = ensemble_distribution(&[&a, &b]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filtered_distribution_renormalizes() {
        let forbidden: BTreeSet<usize> = [1, 3].into();
        let p = filtered_distribution(&[0.5, 3.0, -1.0, 2.0, 0.0], 1.0, &forbidden).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!((p[1], p[3]), (0.0, 0.0));
        let all: BTreeSet<usize> = (0..5).collect();
        assert!(matches!(
            filtered_distribution(&[0.0; 5], 1.0, &all),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sampler_respects_filter_and_seed() {
        let p = init_params(9, 4, 1, 0.8, 5).unwrap();
        let forbidden: BTreeSet<usize> = [1, 4, 7].into();
        let cfg = SamplerConfig {
            prefix: vec![2, 3],
            max_len: 40,
            temperature: 1.0,
            forbidden: forbidden.clone(),
            seed: 11,
            eos: 0,
        };
        let a = sample(&p, &cfg).unwrap();
        assert_eq!(a, sample(&p, &cfg).unwrap());
        assert!(a.iter().all(|t| !forbidden.contains(t)));

        let only_one = SamplerConfig {
            forbidden: (1..9).filter(|&t| t != 5).collect(),
            max_len: 6,
            ..cfg.clone()
        };
        // Only <eos> and token 5 are allowed; every emitted token is 5.
        assert!(sample(&p, &only_one).unwrap().iter().all(|&t| t == 5));

        let bad = SamplerConfig {
            forbidden: [0].into(),
            ..cfg.clone()
        };
        assert!(matches!(sample(&p, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let p = init_params(9, 4, 2, 0.8, 8).unwrap();
        let cfg = SamplerConfig {
            prefix: vec![3],
            max_len: 10,
            temperature: 0.0,
            forbidden: BTreeSet::new(),
            seed: 0,
            eos: 0,
        };
        let s = sample(&p, &cfg).unwrap();
        let g = greedy_decode(&p, &[3], 10, 0).unwrap();
        let g_tokens: Vec<usize> = g.tokens.iter().copied().filter(|&t| t != 0).collect();
        assert_eq!(s, g_tokens);
    }

    #[test]
    fn unit_beam_is_greedy() {
        let p = init_params(7, 5, 2, 1.0, 21).unwrap();
        let cfg = BeamConfig {
            width: 1,
            max_len: 8,
            eos: 0,
            length_normalize: false,
        };
        let b = beam_search(&p, &[3, 2], &cfg).unwrap();
        let g = greedy_decode(&p, &[3, 2], 8, 0).unwrap();
        assert_eq!(b.tokens, g.tokens);
        assert_eq!(b.complete, g.complete);
        assert!((b.log_prob - g.log_prob).abs() < 1e-12);
        let recomputed = sequence_log_prob(&p, &[3, 2], &b.tokens).unwrap();
        assert!((recomputed - b.log_prob).abs() < 1e-9);
    }

    #[test]
    fn zero_width_beam_is_rejected() {
        let p = init_params(7, 5, 1, 1.0, 21).unwrap();
        let cfg = BeamConfig {
            width: 0,
            max_len: 8,
            eos: 0,
            length_normalize: false,
        };
        assert!(matches!(beam_search(&p, &[1], &cfg), Err(Error::Usage(_))));
    }
}
