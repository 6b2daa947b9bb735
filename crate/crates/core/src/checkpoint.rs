//! Self-describing binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "DLSTMCKP"
//! version      u32
//! hidden n     u64
//! layers L     u64
//! vocab V      u64
//! gate order   4 bytes  "ifog"
//! meta         u64 length + UTF-8 JSON {config, mode, progress}
//! vocabulary   u64 count, then per token u32 length + UTF-8 bytes
//! tensors      u32 count, then per tensor u32 rank, rank x u64 dims, f64 data
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! Tensors follow [`ModelParams::tensors`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelParams, GATE_ORDER};
use crate::tensor::Tensor;
use crate::train::{Progress, TrainConfig};

const MAGIC: &[u8; 8] = b"DLSTMCKP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// What the training corpus looked like.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    /// Plain running text.
    Language,
    /// Concatenated `source <sep> target <eos>` pairs.
    Translation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub mode: CorpusMode,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    mode: CorpusMode,
    progress: Progress,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        if p.vocab_size() != self.vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary {} differs from vocabulary list {}",
                p.vocab_size(),
                self.vocab.len()
            )));
        }
        let mut out = Vec::with_capacity(64 + 8 * p.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [p.hidden(), p.num_layers(), p.vocab_size()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(GATE_ORDER.as_bytes());
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            mode: self.mode,
            progress: self.progress,
        })
        .map_err(|e| Error::Config(format!("cannot encode checkpoint metadata: {e}")))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.vocab.len() as u64).to_le_bytes());
        for t in self.vocab.tokens() {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        let tensors = p.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let hidden = r.usize()?;
        let layers = r.usize()?;
        let vocab_size = r.usize()?;
        let gate = r.take(4)?;
        if gate != GATE_ORDER.as_bytes() {
            return Err(Error::Corrupt(format!(
                "unexpected gate order {:?}",
                String::from_utf8_lossy(gate)
            )));
        }
        let meta_len = r.usize()?;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Corrupt(format!("bad metadata: {e}")))?;
        let count = r.usize()?;
        let mut tokens = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("vocabulary is not UTF-8".into()))?;
            tokens.push(s.to_owned());
        }
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| Error::Corrupt(e.to_string()))?;

        let n_tensors = r.u32()? as usize;
        if n_tensors != 2 * layers + 3 {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {n_tensors}",
                2 * layers + 3
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Corrupt("tensor too large".into()))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Corrupt("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(&shape, data)?.with_grad());
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after tensors".into()));
        }
        let mut it = tensors.into_iter();
        let embedding = it.next().unwrap();
        let layer_params = (0..layers)
            .map(|_| LayerParams {
                w: it.next().unwrap(),
                b: it.next().unwrap(),
            })
            .collect();
        let params = ModelParams {
            embedding,
            layers: layer_params,
            output_w: it.next().unwrap(),
            output_b: it.next().unwrap(),
        };
        params.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        if params.hidden() != hidden || params.vocab_size() != vocab_size || vocab.len() != vocab_size {
            return Err(Error::Corrupt("header dimensions disagree with tensors".into()));
        }
        Ok(Checkpoint {
            config: meta.config,
            mode: meta.mode,
            vocab,
            params,
            progress: meta.progress,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
            e => e,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Corrupt("length overflows usize".into()))
    }
}
