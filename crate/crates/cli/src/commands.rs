use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use droplstm::data::{read_text, TokenId, SEP};
use droplstm::infer::{self, beam_search, BeamConfig, SamplerConfig};
use droplstm::run::{train_in_dir_with, RunData, RunOptions};
use droplstm::{batchify, Checkpoint, CorpusMode, Error, Overrides, Preset, Result, RunDir, Vocabulary};
use serde::Serialize;

use crate::corpus::{self, SplitText, SPLITS};
use crate::{ConfigArgs, EvalArgs, PrepareArgs, SampleArgs, TrainArgs, TranslateArgs};

fn mode(translation: bool) -> CorpusMode {
    if translation {
        CorpusMode::Translation
    } else {
        CorpusMode::Language
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(corpus::missing("data directory", dir))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct SplitCounts {
    tokens: usize,
    unknown: usize,
}

#[derive(Serialize)]
struct PrepareReport {
    vocab_size: usize,
    splits: BTreeMap<String, SplitCounts>,
}

pub fn prepare(args: PrepareArgs) -> Result<()> {
    require_dir(&args.data_dir)?;
    let mode = mode(args.translation);
    if !corpus::split_exists(&args.data_dir, "train", mode) {
        return Err(corpus::missing("training split", &args.data_dir));
    }
    let train = SplitText::read(&args.data_dir, "train", mode)?;
    let vocab = train.build_vocab(args.vocab_size)?;
    let mut splits = BTreeMap::new();
    for split in SPLITS {
        if !corpus::split_exists(&args.data_dir, split, mode) {
            continue;
        }
        let ids = SplitText::read(&args.data_dir, split, mode)?.encode(&vocab)?;
        let unknown = ids.iter().filter(|&&t| t == vocab.unk()).count();
        println!("{split}: {} tokens, {unknown} unknown", ids.len());
        splits.insert(
            split.to_string(),
            SplitCounts {
                tokens: ids.len(),
                unknown,
            },
        );
    }
    println!("vocabulary: {} words", vocab.len());

    let out = args.out_dir.unwrap_or(args.data_dir);
    create_dir(&out)?;
    vocab.save(&out.join("vocab.txt"))?;
    let report = PrepareReport {
        vocab_size: vocab.len(),
        splits,
    };
    let path = out.join("counts.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn flag_overrides(c: &ConfigArgs) -> Overrides {
    Overrides {
        preset: c.preset,
        hidden: c.hidden,
        layers: c.layers,
        unroll: c.unroll,
        batch_size: c.batch_size,
        dropout: c.dropout,
        lr: c.lr,
        epochs: c.epochs,
        clip: c.clip,
        seed: c.seed,
        ..Default::default()
    }
}

fn file_overrides(path: &Path) -> Result<Overrides> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

struct Prepared {
    vocab: Vocabulary,
    train: Vec<TokenId>,
    valid: Option<Vec<TokenId>>,
}

fn training_data(args: &TrainArgs, mode: CorpusMode) -> Result<Prepared> {
    if let Some(n) = args.toy_corpus {
        let (train, valid) = corpus::toy_text(n);
        let vocab = Vocabulary::build(train.lines(), args.vocab_size, false)?;
        let train = corpus::truncated(droplstm::data::encode_text(&train, &vocab), n);
        let valid = droplstm::data::encode_text(&valid, &vocab);
        return Ok(Prepared {
            vocab,
            train,
            valid: Some(valid),
        });
    }
    let dir = args.data_dir.as_deref().expect("clap requires a data source");
    require_dir(dir)?;
    if !corpus::split_exists(dir, "train", mode) {
        return Err(corpus::missing("training split", dir));
    }
    let train = SplitText::read(dir, "train", mode)?;
    let vocab_path = dir.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        train.build_vocab(args.vocab_size)?
    };
    if mode == CorpusMode::Translation && vocab.sep().is_none() {
        return Err(Error::Usage(format!(
            "{} has no {SEP} token; prepare it with --translation",
            vocab_path.display()
        )));
    }
    let valid = if corpus::split_exists(dir, "valid", mode) {
        Some(SplitText::read(dir, "valid", mode)?.encode(&vocab)?)
    } else {
        None
    };
    Ok(Prepared {
        train: train.encode(&vocab)?,
        vocab,
        valid,
    })
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = match &args.config.config {
        Some(path) => file_overrides(path)?,
        None => Overrides::default(),
    };
    let cfg = Overrides::layered(&file, &flag_overrides(&args.config))?.resolve(Preset::Medium)?;
    let mode = mode(args.translation);
    let data = training_data(&args, mode)?;
    println!(
        "training on {} tokens, vocabulary {}, {} layers of width {}",
        data.train.len(),
        data.vocab.len(),
        cfg.layers,
        cfg.hidden
    );
    let dir = RunDir::new(&args.out_dir);
    let run = RunData {
        mode,
        vocab: &data.vocab,
        train: &data.train,
        valid: data.valid.as_deref(),
    };
    let opts = RunOptions {
        resume: args.resume,
        stop_after: None,
    };
    let report = train_in_dir_with(&dir, &cfg, &run, opts, &mut |m| {
        let valid = m.valid_ppl.map(|v| format!(" valid ppl {v:.3}")).unwrap_or_default();
        println!(
            "epoch {} lr {:.4} train ppl {:.3}{valid} clipped {} ({:.1}s)",
            m.epoch, m.lr, m.train_ppl, m.grad_clip_events, m.wall_seconds
        );
    })?;
    if let Some(e) = report.resumed_from {
        println!("resumed from epoch {e}");
    }
    match report.metrics.last() {
        Some(m) => println!("final train perplexity {}", m.train_ppl),
        None => println!("no epochs run; initial checkpoint written"),
    }
    println!("run directory {}", dir.root().display());
    Ok(())
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    if let Some((first, rest)) = cks.split_first() {
        for (ck, path) in rest.iter().zip(&paths[1..]) {
            if ck.vocab != first.vocab {
                return Err(Error::Usage(format!(
                    "{} uses a different vocabulary from {}",
                    path.display(),
                    paths[0].display()
                )));
            }
            if ck.mode != first.mode {
                return Err(Error::Usage(format!(
                    "{} was trained on a different kind of corpus from {}",
                    path.display(),
                    paths[0].display()
                )));
            }
        }
    }
    Ok(cks)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cks = load_checkpoints(&args.checkpoint)?;
    let first = &cks[0];
    require_dir(&args.data_dir)?;
    let splits: Vec<String> = if args.split.is_empty() {
        SPLITS
            .iter()
            .filter(|s| **s != "train" && corpus::split_exists(&args.data_dir, s, first.mode))
            .map(|s| s.to_string())
            .collect()
    } else {
        args.split.clone()
    };
    if splits.is_empty() {
        return Err(corpus::missing("validation or test split", &args.data_dir));
    }
    let unroll = args.unroll.unwrap_or(first.config.unroll);
    let batch = args.batch_size.unwrap_or(first.config.batch_size);
    let models: Vec<_> = cks.iter().map(|c| &c.params).collect();
    for split in &splits {
        if !corpus::split_exists(&args.data_dir, split, first.mode) {
            return Err(corpus::missing(&format!("split {split}"), &args.data_dir));
        }
        let ids = SplitText::read(&args.data_dir, split, first.mode)?.encode(&first.vocab)?;
        let corpus = batchify(&ids, batch)?;
        let ppl = infer::ensemble_eval(&models, &corpus, unroll)?;
        println!("{split} perplexity {ppl}");
    }
    Ok(())
}

fn prefix_ids(vocab: &Vocabulary, prefix: &str) -> Vec<TokenId> {
    prefix
        .split_whitespace()
        .map(|w| {
            vocab.id(w).unwrap_or_else(|| {
                eprintln!("warning: {w:?} is not in the vocabulary; using <unk>");
                vocab.unk()
            })
        })
        .collect()
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let vocab = &ck.vocab;
    let mut prefix = vec![vocab.eos()];
    prefix.extend(prefix_ids(vocab, &args.prefix));
    let forbidden: BTreeSet<TokenId> = args.forbid.iter().filter_map(|w| vocab.id(w)).collect();
    let cfg = SamplerConfig {
        prefix,
        max_len: args.max_len,
        temperature: args.temperature,
        forbidden,
        seed: args.seed,
        eos: vocab.eos(),
    };
    let continuation = infer::sample(&ck.params, &cfg)?;
    let words: Vec<&str> = args
        .prefix
        .split_whitespace()
        .chain(continuation.iter().map(|&t| vocab.token(t).unwrap_or("<unk>")))
        .collect();
    println!("{}", words.join(" "));
    Ok(())
}

pub fn translate(args: TranslateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    if ck.mode != CorpusMode::Translation {
        return Err(Error::Usage(format!(
            "{} was not trained on a parallel corpus",
            args.checkpoint.display()
        )));
    }
    let vocab = &ck.vocab;
    let sep = vocab
        .sep()
        .ok_or_else(|| Error::Usage(format!("{} has no {SEP} token", args.checkpoint.display())))?;
    let cfg = BeamConfig {
        width: args.beam_width,
        max_len: args.max_len,
        eos: vocab.eos(),
        length_normalize: false,
    };
    let text = read_text(&args.input)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut prefix = vec![vocab.eos()];
        prefix.extend(prefix_ids(vocab, line));
        prefix.push(sep);
        let result = beam_search(&ck.params, &prefix, &cfg)?;
        let body = match result.tokens.split_last() {
            Some((&last, head)) if last == vocab.eos() => head,
            _ => &result.tokens[..],
        };
        eprintln!(
            "line {}: log-prob {:.4}{}",
            i + 1,
            result.log_prob,
            if result.complete {
                ""
            } else {
                " (no <eos> within max-len)"
            }
        );
        out.push_str(&vocab.decode(body));
        out.push('\n');
    }
    match &args.output {
        Some(path) => fs::write(path, out).map_err(|e| Error::io(path, e)),
        None => std::io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}
