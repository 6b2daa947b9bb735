//! Truncated BPTT training with plain SGD.
//!
//! Each window's loss is the sum of its `T * B` token cross-entropies. The
//! gradient of that sum, divided by the batch size `B`, is the update
//! direction; its global L2 norm is clipped at `clip` before the step
//! `p -= lr * g / B`. Hidden states flow from window to window as constants,
//! and are reset to zero at the start of every epoch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchedCorpus, TokenId};
use crate::dropout::Dropout;
use crate::error::{Error, Result};
use crate::infer;
use crate::model::{forward_sequence, take_grads, LstmState, ModelParams, Regularizer};
use crate::tape::Tape;

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Units per layer; also the embedding width.
    pub hidden: usize,
    pub layers: usize,
    /// Unrolled timesteps per window.
    pub unroll: usize,
    /// Parallel streams per minibatch.
    pub batch_size: usize,
    /// Weights start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Drop probability on non-recurrent connections.
    pub dropout: f64,
    pub lr: f64,
    /// Last epoch trained at the initial learning rate.
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    /// Threshold on the batch-normalized global gradient norm.
    pub clip: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Medium,
    Large,
    BaselineSmall,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Medium, Preset::Large, Preset::BaselineSmall];

    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Medium => TrainConfig {
                hidden: 650,
                layers: 2,
                unroll: 35,
                batch_size: 20,
                init_range: 0.05,
                dropout: 0.5,
                lr: 1.0,
                decay_start_epoch: 6,
                decay_factor: 1.2,
                epochs: 39,
                clip: 5.0,
                seed: 1,
            },
            Preset::Large => TrainConfig {
                hidden: 1500,
                layers: 2,
                unroll: 35,
                batch_size: 20,
                init_range: 0.04,
                dropout: 0.65,
                lr: 1.0,
                decay_start_epoch: 14,
                decay_factor: 1.15,
                epochs: 55,
                clip: 10.0,
                seed: 1,
            },
            Preset::BaselineSmall => TrainConfig {
                hidden: 200,
                layers: 2,
                unroll: 20,
                batch_size: 20,
                init_range: 0.1,
                dropout: 0.0,
                lr: 1.0,
                decay_start_epoch: 4,
                decay_factor: 2.0,
                epochs: 13,
                clip: 5.0,
                seed: 1,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Medium => "medium",
            Preset::Large => "large",
            Preset::BaselineSmall => "baseline-small",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {s:?} (expected medium, large or baseline-small)"
            ))
        })
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.layers == 0 || self.unroll == 0 || self.batch_size == 0 {
            return fail(format!(
                "hidden, layers, unroll and batch size must be positive (got {}, {}, {}, {})",
                self.hidden, self.layers, self.unroll, self.batch_size
            ));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return fail(format!(
                "init range must be finite and non-negative, got {}",
                self.init_range
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.decay_factor > 1.0) {
            return fail(format!("decay factor must exceed 1, got {}", self.decay_factor));
        }
        if !(self.clip > 0.0) {
            return fail(format!("clip threshold must be positive, got {}", self.clip));
        }
        if self.decay_start_epoch == 0 {
            return fail("decay start epoch must be at least 1".into());
        }
        Ok(())
    }

    pub fn init_params(&self, vocab: usize) -> Result<ModelParams> {
        init_params(vocab, self.hidden, self.layers, self.init_range, self.seed)
    }
}

/// Uniform `[-range, range]` weights and embeddings, zero biases.
pub fn init_params(vocab: usize, hidden: usize, layers: usize, range: f64, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(vocab, hidden, layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |data: &mut [f64]| {
        for v in data {
            *v = range * (2.0 * rng.random::<f64>() - 1.0);
        }
    };
    fill(params.embedding.data_mut());
    for l in &mut params.layers {
        fill(l.w.data_mut());
    }
    fill(params.output_w.data_mut());
    Ok(params)
}

/// Global L2 norm of all gradients divided by `batch`.
pub fn normalized_grad_norm(params: &ModelParams, batch: usize) -> f64 {
    let sq: f64 = params
        .tensors()
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    sq.sqrt() / batch as f64
}

/// Rescales every gradient so that the batch-normalized global norm is at
/// most `threshold`. Returns the factor applied (1 when nothing changed).
pub fn clip_gradients(params: &mut ModelParams, batch: usize, threshold: f64) -> f64 {
    let norm = normalized_grad_norm(params, batch);
    if norm <= threshold {
        return 1.0;
    }
    let scale = threshold / norm;
    for t in params.tensors_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    scale
}

/// `p -= lr * g / batch` for every parameter.
pub fn sgd_step(params: &mut ModelParams, lr: f64, batch: usize) {
    let k = lr / batch as f64;
    for t in params.tensors_mut() {
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        t.data_mut().iter_mut().zip(&g).for_each(|(p, g)| *p -= k * g);
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    if epoch <= cfg.decay_start_epoch {
        return Ok(cfg.lr);
    }
    let exponent = i32::try_from(epoch - cfg.decay_start_epoch).unwrap_or(i32::MAX);
    Ok(cfg.lr / cfg.decay_factor.powi(exponent))
}

/// Totals accumulated over one pass of training windows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub nll_sum: f64,
    pub tokens: usize,
    pub windows: usize,
    pub clip_events: usize,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_loss().exp()
    }
}

/// Forward and backward over one window, returning `(summed loss, final state)`
/// and leaving the raw summed-loss gradient in the parameters' gradient slots.
pub fn window_gradients(
    params: &mut ModelParams,
    inputs: &[TokenId],
    targets: &[TokenId],
    batch: usize,
    state: &LstmState,
    dropout: &mut impl Regularizer,
) -> Result<(f64, LstmState)> {
    let (loss, final_state, grads) = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let init = state.bind(&mut tape);
        let out = forward_sequence(&mut tape, &bound, inputs, targets, batch, init, dropout)?;
        let total = tape.sum(out.losses)?;
        let loss = tape.scalar(total);
        tape.backward(total)?;
        let final_state = LstmState::from_vars(&tape, &out.final_state);
        (loss, final_state, take_grads(&mut tape, &bound))
    };
    params.zero_grad();
    params.accumulate_grads(grads)?;
    Ok((loss, final_state))
}

/// One epoch of truncated BPTT starting from `state`.
pub fn train_epoch(
    params: &mut ModelParams,
    corpus: &BatchedCorpus,
    state: LstmState,
    cfg: &TrainConfig,
    lr: f64,
    dropout: &mut impl Regularizer,
) -> Result<(EpochStats, LstmState)> {
    let batch = corpus.batch();
    let mut state = state;
    let mut stats = EpochStats::default();
    for (k, w) in corpus.windows(cfg.unroll).enumerate() {
        let (loss, next) = window_gradients(params, &w.inputs, &w.targets, batch, &state, dropout)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss} in window {k}")));
        }
        if clip_gradients(params, batch, cfg.clip) < 1.0 {
            stats.clip_events += 1;
        }
        sgd_step(params, lr, batch);
        stats.nll_sum += loss;
        stats.tokens += w.inputs.len();
        stats.windows += 1;
        state = next;
    }
    Ok((stats, state))
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppl: f64,
    pub valid_ppl: Option<f64>,
    /// Not written to the metrics log, which must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_seconds: f64,
    pub grad_clip_events: usize,
}

/// Position of a run: number of completed epochs and the dropout counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub dropout_step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Receives the model after initialization and after every epoch.
pub trait EpochSink {
    fn on_start(&mut self, _params: &ModelParams, _progress: Progress) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, params: &ModelParams, metrics: &EpochMetrics, progress: Progress) -> Result<Flow>;
}

/// Sink that keeps nothing.
pub struct Discard;

impl EpochSink for Discard {
    fn on_epoch(&mut self, _: &ModelParams, _: &EpochMetrics, _: Progress) -> Result<Flow> {
        Ok(Flow::Continue)
    }
}

/// Training run that can be stopped after any epoch and resumed.
pub struct Trainer {
    cfg: TrainConfig,
    params: ModelParams,
    dropout: Dropout,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.init_params(vocab)?;
        Self::resume(cfg, params, Progress::default())
    }

    pub fn resume(cfg: TrainConfig, mut params: ModelParams, progress: Progress) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if params.hidden() != cfg.hidden || params.num_layers() != cfg.layers {
            return Err(Error::Config(format!(
                "parameters are n={} L={} but the config says n={} L={}",
                params.hidden(),
                params.num_layers(),
                cfg.hidden,
                cfg.layers
            )));
        }
        params.set_requires_grad(true);
        let mut dropout = Dropout::train(cfg.dropout, cfg.seed)?;
        dropout.set_step(progress.dropout_step);
        Ok(Trainer {
            cfg,
            params,
            dropout,
            epoch: progress.epoch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch,
            dropout_step: self.dropout.step(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Trains one more epoch and evaluates on `valid` if given.
    pub fn step_epoch(&mut self, train: &BatchedCorpus, valid: Option<&BatchedCorpus>) -> Result<EpochMetrics> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let lr = lr_at_epoch(epoch, &self.cfg)?;
        let state = LstmState::for_model(&self.params, train.batch());
        let (stats, _) = train_epoch(&mut self.params, train, state, &self.cfg, lr, &mut self.dropout)?;
        let valid_ppl = valid
            .map(|v| infer::perplexity(&self.params, v, self.cfg.unroll))
            .transpose()?;
        self.epoch = epoch;
        Ok(EpochMetrics {
            epoch,
            lr,
            train_ppl: stats.perplexity(),
            valid_ppl,
            wall_seconds: started.elapsed().as_secs_f64(),
            grad_clip_events: stats.clip_events,
        })
    }

    /// Runs the remaining epochs, reporting each to `sink`.
    pub fn run(
        &mut self,
        train: &BatchedCorpus,
        valid: Option<&BatchedCorpus>,
        sink: &mut dyn EpochSink,
    ) -> Result<Vec<EpochMetrics>> {
        if self.epoch == 0 {
            sink.on_start(&self.params, self.progress())?;
        }
        let mut metrics = Vec::new();
        while !self.is_finished() {
            let m = self.step_epoch(train, valid)?;
            let flow = sink.on_epoch(&self.params, &m, self.progress())?;
            metrics.push(m);
            if flow == Flow::Stop {
                break;
            }
        }
        Ok(metrics)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains from scratch on `train` tokens, evaluating on `valid` after every epoch.
pub fn train(
    cfg: &TrainConfig,
    vocab: usize,
    train_tokens: &[TokenId],
    valid_tokens: Option<&[TokenId]>,
    sink: &mut dyn EpochSink,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), vocab)?;
    let train = crate::data::batchify(train_tokens, cfg.batch_size)?;
    let valid = valid_tokens
        .map(|v| crate::data::batchify(v, cfg.batch_size))
        .transpose()?;
    let metrics = trainer.run(&train, valid.as_ref(), sink)?;
    Ok(TrainOutcome {
        params: trainer.into_params(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grads(params: &mut ModelParams, f: impl Fn(usize) -> f64) {
        let mut k = 0;
        for t in params.tensors_mut() {
            let g: Vec<f64> = (0..t.numel())
                .map(|_| {
                    k += 1;
                    f(k)
                })
                .collect();
            t.clear_grad();
            t.accumulate_grad(&g).unwrap();
        }
    }

    fn set_norm(params: &mut ModelParams, batch: usize, target: f64) {
        with_grads(params, |k| (k % 7) as f64 - 3.0);
        let norm = normalized_grad_norm(params, batch);
        for t in params.tensors_mut() {
            t.grad_mut().unwrap().iter_mut().for_each(|g| *g *= target / norm);
        }
    }

    #[test]
    fn preset_values() {
        let m = Preset::Medium.config();
        assert_eq!((m.hidden, m.unroll, m.batch_size, m.epochs), (650, 35, 20, 39));
        assert_eq!((m.init_range, m.dropout, m.clip, m.decay_factor), (0.05, 0.5, 5.0, 1.2));
        let l = Preset::Large.config();
        assert_eq!((l.hidden, l.epochs, l.decay_start_epoch), (1500, 55, 14));
        assert_eq!(
            (l.init_range, l.dropout, l.clip, l.decay_factor),
            (0.04, 0.65, 10.0, 1.15)
        );
        let b = Preset::BaselineSmall.config();
        assert_eq!((b.hidden, b.unroll, b.epochs, b.decay_start_epoch), (200, 20, 13, 4));
        assert_eq!((b.init_range, b.dropout, b.decay_factor), (0.1, 0.0, 2.0));
        for p in Preset::ALL {
            p.config().validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = Preset::Medium.config();
        let bad = [
            TrainConfig {
                init_range: -0.1,
                ..base.clone()
            },
            TrainConfig {
                lr: 0.0,
                ..base.clone()
            },
            TrainConfig {
                decay_factor: 1.0,
                ..base.clone()
            },
            TrainConfig {
                clip: -1.0,
                ..base.clone()
            },
            TrainConfig {
                dropout: 1.0,
                ..base.clone()
            },
            TrainConfig {
                decay_start_epoch: 0,
                ..base.clone()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn learning_rate_schedules() {
        let m = Preset::Medium.config();
        assert_eq!(lr_at_epoch(6, &m).unwrap(), 1.0);
        assert!((lr_at_epoch(7, &m).unwrap() - 1.0 / 1.2).abs() < 1e-12);
        let b = Preset::BaselineSmall.config();
        assert_eq!(lr_at_epoch(5, &b).unwrap(), 0.5);
        assert!(lr_at_epoch(0, &b).is_err());
        assert!(lr_at_epoch(14, &b).is_err());
        for cfg in [m, b, Preset::Large.config()] {
            let lrs: Vec<f64> = (1..=cfg.epochs).map(|e| lr_at_epoch(e, &cfg).unwrap()).collect();
            for (e, pair) in lrs.windows(2).enumerate() {
                assert!(pair[1] <= pair[0]);
                if e + 1 >= cfg.decay_start_epoch {
                    assert!(pair[1] < pair[0]);
                }
            }
        }
    }

    #[test]
    fn init_is_uniform_and_seeded() {
        let p = init_params(1000, 100, 2, 0.05, 7).unwrap();
        let weights: Vec<f64> = [&p.embedding, &p.layers[0].w, &p.layers[1].w, &p.output_w]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        assert!(weights.len() >= 100_000);
        assert!(weights.iter().all(|w| w.abs() <= 0.05));
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        assert!(mean.abs() < 0.001, "{mean}");
        assert!(p.layers.iter().all(|l| l.b.data().iter().all(|&b| b == 0.0)));
        assert!(p.output_b.data().iter().all(|&b| b == 0.0));
        assert_eq!(p, init_params(1000, 100, 2, 0.05, 7).unwrap());
        let z = init_params(10, 4, 1, 0.0, 7).unwrap();
        assert!(z.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn clipping_examples() {
        let mut p = ModelParams::zeros(5, 3, 1).unwrap();
        set_norm(&mut p, 4, 4.0);
        let before: Vec<Vec<f64>> = p.tensors().iter().map(|t| t.grad().unwrap().to_vec()).collect();
        assert_eq!(clip_gradients(&mut p, 4, 5.0), 1.0);
        let after: Vec<Vec<f64>> = p.tensors().iter().map(|t| t.grad().unwrap().to_vec()).collect();
        assert_eq!(before, after);

        set_norm(&mut p, 4, 10.0);
        let scale = clip_gradients(&mut p, 4, 5.0);
        assert!((scale - 0.5).abs() < 1e-12);
        assert!((normalized_grad_norm(&p, 4) - 5.0).abs() < 1e-12);

        with_grads(&mut p, |_| 0.0);
        assert_eq!(clip_gradients(&mut p, 4, 5.0), 1.0);
        assert!(p.tensors().iter().all(|t| t.grad().unwrap().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut p = init_params(6, 3, 1, 0.1, 1).unwrap();
        with_grads(&mut p, |k| k as f64 * 0.01);
        let before = p.clone();
        sgd_step(&mut p, 0.7, 2);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for ((x, y), g) in a.data().iter().zip(b.data()).zip(b.grad().unwrap()) {
                assert_eq!(*x, y - (0.7 / 2.0) * g);
            }
        }
    }
}
