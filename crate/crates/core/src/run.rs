//! Reproducible training runs in an output directory.
//!
//! A run directory holds:
//!
//! - `config.json`: the resolved [`TrainConfig`] that ran
//! - `vocab.txt`: one token per line, id = line number
//! - `metrics.jsonl`: one [`EpochMetrics`] record per epoch
//! - `timings.jsonl`: wall-clock seconds per epoch, kept apart from the
//!   metrics so that the latter stay byte-reproducible
//! - `epoch-XXXX.ckpt`: a checkpoint after initialization and after every epoch

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CorpusMode};
use crate::data::{batchify, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::{EpochMetrics, EpochSink, Flow, Preset, Progress, TrainConfig, Trainer};

/// Partial training configuration, as read from a config file or flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub unroll: Option<usize>,
    pub batch_size: Option<usize>,
    pub init_range: Option<f64>,
    pub dropout: Option<f64>,
    pub lr: Option<f64>,
    pub decay_start_epoch: Option<usize>,
    pub decay_factor: Option<f64>,
    pub epochs: Option<usize>,
    pub clip: Option<f64>,
    pub seed: Option<u64>,
}

macro_rules! layer_fields {
    ($base:ident, $top:ident, $($f:ident),*) => {
        Overrides {
            $($f: $top.$f.or($base.$f),)*
            ..Default::default()
        }
    };
}

impl Overrides {
    /// Combines a config file with command-line flags; flags win field by
    /// field, but naming two different presets is a contradiction.
    pub fn layered(file: &Overrides, flags: &Overrides) -> Result<Overrides> {
        let preset = match (file.preset, flags.preset) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "config file selects preset {a} but the command line selects {b}"
                )))
            }
            (a, b) => b.or(a),
        };
        let mut out = layer_fields!(
            file,
            flags,
            hidden,
            layers,
            unroll,
            batch_size,
            init_range,
            dropout,
            lr,
            decay_start_epoch,
            decay_factor,
            epochs,
            clip,
            seed
        );
        out.preset = preset;
        Ok(out)
    }

    /// Fills every unset field from the preset (or `fallback`) and validates.
    pub fn resolve(&self, fallback: Preset) -> Result<TrainConfig> {
        let base = self.preset.unwrap_or(fallback).config();
        let cfg = TrainConfig {
            hidden: self.hidden.unwrap_or(base.hidden),
            layers: self.layers.unwrap_or(base.layers),
            unroll: self.unroll.unwrap_or(base.unroll),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            init_range: self.init_range.unwrap_or(base.init_range),
            dropout: self.dropout.unwrap_or(base.dropout),
            lr: self.lr.unwrap_or(base.lr),
            decay_start_epoch: self.decay_start_epoch.unwrap_or(base.decay_start_epoch),
            decay_factor: self.decay_factor.unwrap_or(base.decay_factor),
            epochs: self.epochs.unwrap_or(base.epochs),
            clip: self.clip.unwrap_or(base.clip),
            seed: self.seed.unwrap_or(base.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize, Deserialize)]
struct Timing {
    epoch: usize,
    wall_seconds: f64,
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.root.join("timings.jsonl")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch-{epoch:04}.ckpt"))
    }

    /// Checkpoints present on disk, by ascending epoch.
    pub fn checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        let mut found = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.root, e))?.path();
            let epoch = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse().ok());
            if let Some(epoch) = epoch {
                found.push((epoch, path));
            }
        }
        found.sort();
        Ok(found)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<(usize, PathBuf)>> {
        Ok(self.checkpoints()?.pop())
    }

    pub fn read_config(&self) -> Result<TrainConfig> {
        let path = self.config_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn read_metrics(&self) -> Result<Vec<EpochMetrics>> {
        read_jsonl(&self.metrics_path())
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("records serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Training corpus of a run, already encoded with `vocab`.
pub struct RunData<'a> {
    pub mode: CorpusMode,
    pub vocab: &'a Vocabulary,
    pub train: &'a [TokenId],
    pub valid: Option<&'a [TokenId]>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the directory, if any.
    pub resume: bool,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

pub struct RunReport {
    pub params: ModelParams,
    /// Metrics of every completed epoch, including ones from before a resume.
    pub metrics: Vec<EpochMetrics>,
    pub progress: Progress,
    /// Epoch the run resumed from, if it did.
    pub resumed_from: Option<usize>,
}

struct DirSink<'a> {
    dir: &'a RunDir,
    observer: &'a mut dyn FnMut(&EpochMetrics),
    cfg: &'a TrainConfig,
    mode: CorpusMode,
    vocab: &'a Vocabulary,
    stop_after: Option<usize>,
}

impl DirSink<'_> {
    fn checkpoint(&self, params: &ModelParams, progress: Progress) -> Result<()> {
        Checkpoint {
            config: self.cfg.clone(),
            mode: self.mode,
            vocab: self.vocab.clone(),
            params: params.clone(),
            progress,
        }
        .save(&self.dir.checkpoint_path(progress.epoch))
    }
}

impl EpochSink for DirSink<'_> {
    fn on_start(&mut self, params: &ModelParams, progress: Progress) -> Result<()> {
        self.checkpoint(params, progress)
    }

    fn on_epoch(&mut self, params: &ModelParams, metrics: &EpochMetrics, progress: Progress) -> Result<Flow> {
        (self.observer)(metrics);
        append_jsonl(&self.dir.metrics_path(), metrics)?;
        append_jsonl(
            &self.dir.timings_path(),
            &Timing {
                epoch: metrics.epoch,
                wall_seconds: metrics.wall_seconds,
            },
        )?;
        self.checkpoint(params, progress)?;
        Ok(match self.stop_after {
            Some(k) if progress.epoch >= k => Flow::Stop,
            _ => Flow::Continue,
        })
    }
}

/// Fields that must agree between a checkpoint and the config resuming it.
/// Only the epoch budget may change.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { epochs: 0, ..a.clone() } == TrainConfig { epochs: 0, ..b.clone() }
}

/// Trains `cfg` on `data`, writing everything into `dir`.
pub fn train_in_dir(dir: &RunDir, cfg: &TrainConfig, data: &RunData<'_>, opts: RunOptions) -> Result<RunReport> {
    train_in_dir_with(dir, cfg, data, opts, &mut |_| {})
}

/// [`train_in_dir`], showing each epoch's metrics to `observer` as it ends.
pub fn train_in_dir_with(
    dir: &RunDir,
    cfg: &TrainConfig,
    data: &RunData<'_>,
    opts: RunOptions,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunReport> {
    cfg.validate()?;
    let train = batchify(data.train, cfg.batch_size)?;
    let valid = data.valid.map(|v| batchify(v, cfg.batch_size)).transpose()?;
    if let Some(max) = train
        .max_id()
        .into_iter()
        .chain(valid.as_ref().and_then(|v| v.max_id()))
        .max()
    {
        if max >= data.vocab.len() {
            return Err(Error::Index {
                what: "token id",
                index: max,
                limit: data.vocab.len(),
            });
        }
    }
    fs::create_dir_all(dir.root()).map_err(|e| Error::io(dir.root(), e))?;

    let latest = if opts.resume { dir.latest_checkpoint()? } else { None };
    let (mut trainer, prior, resumed_from) = match latest {
        Some((epoch, path)) => {
            let ck = Checkpoint::load(&path)?;
            if !same_run(&ck.config, cfg) {
                return Err(Error::Config(format!(
                    "{} was trained with a different configuration",
                    path.display()
                )));
            }
            if &ck.vocab != data.vocab || ck.mode != data.mode {
                return Err(Error::Config(format!(
                    "{} was trained on a different corpus",
                    path.display()
                )));
            }
            let keep = |e: usize| e <= ck.progress.epoch;
            let metrics: Vec<EpochMetrics> = dir.read_metrics()?.into_iter().filter(|m| keep(m.epoch)).collect();
            let timings: Vec<Timing> = read_jsonl::<Timing>(&dir.timings_path())?
                .into_iter()
                .filter(|t| keep(t.epoch))
                .collect();
            write_jsonl(&dir.metrics_path(), &metrics)?;
            write_jsonl(&dir.timings_path(), &timings)?;
            for (e, stale) in dir.checkpoints()? {
                if e > epoch {
                    fs::remove_file(&stale).map_err(|err| Error::io(&stale, err))?;
                }
            }
            let trainer = Trainer::resume(cfg.clone(), ck.params, ck.progress)?;
            (trainer, metrics, Some(epoch))
        }
        None => {
            for (_, stale) in dir.checkpoints()? {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
            write_jsonl::<EpochMetrics>(&dir.metrics_path(), &[])?;
            write_jsonl::<Timing>(&dir.timings_path(), &[])?;
            (Trainer::new(cfg.clone(), data.vocab.len())?, Vec::new(), None)
        }
    };

    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    let path = dir.config_path();
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    data.vocab.save(&dir.vocab_path())?;

    let mut sink = DirSink {
        dir,
        observer,
        cfg,
        mode: data.mode,
        vocab: data.vocab,
        stop_after: opts.stop_after,
    };
    let mut metrics = prior;
    if opts.stop_after.is_some_and(|k| trainer.progress().epoch >= k) {
        if trainer.progress().epoch == 0 {
            sink.on_start(trainer.params(), trainer.progress())?;
        }
    } else {
        metrics.extend(trainer.run(&train, valid.as_ref(), &mut sink)?);
    }
    let progress = trainer.progress();
    Ok(RunReport {
        params: trainer.into_params(),
        metrics,
        progress,
        resumed_from,
    })
}
