//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AFMTCKPT" | u32 version
//! u64 len | config JSON
//! u32 count | count x (u32 len | token bytes)     vocabulary
//! u64 len | lexicon text (len 0 = none)
//! u32 count | count x (u32 len | name | u32 rank | rank x u64 dim | f64 values)
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabelSchema;
use crate::model::{AffectModel, Featurizer, ModelConfig};
use crate::numerics::Tensor;
use crate::text::{Lexicon, Vocabulary};
use crate::trainer::TrainingConfig;

pub const MAGIC: &[u8; 8] = b"AFMTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
#[error("checkpoint {path}: {reason}")]
pub struct CheckpointError {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    labels: Vec<String>,
    max_len: usize,
    min_freq: usize,
    max_vocab: usize,
    training: Option<TrainingConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AffectModel,
    pub featurizer: Featurizer,
    pub schema: LabelSchema,
    pub training: Option<TrainingConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = Header {
            model: self.model.config().clone(),
            labels: self.schema.names().to_vec(),
            max_len: self.featurizer.max_len,
            min_freq: self.featurizer.vocab.min_freq(),
            max_vocab: self.featurizer.vocab.max_size(),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);

        let tokens = self.featurizer.vocab.tokens();
        put_u32(&mut out, tokens.len() as u32);
        for t in tokens {
            put_str(&mut out, t);
        }

        let lex = self.featurizer.lexicon.as_ref().map(Lexicon::to_file_string).unwrap_or_default();
        put_u64(&mut out, lex.len() as u64);
        out.extend_from_slice(lex.as_bytes());

        put_u32(&mut out, self.model.params.len() as u32);
        for p in self.model.params.iter() {
            put_str(&mut out, &p.name);
            let shape = p.tensor.shape();
            put_u32(&mut out, shape.len() as u32);
            for &d in shape {
                put_u64(&mut out, d as u64);
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let fail = |reason: String| CheckpointError {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let len = r.len64().map_err(&fail)?;
        let header: Header =
            serde_json::from_slice(r.take(len).map_err(&fail)?).map_err(|e| fail(format!("bad config block: {e}")))?;

        let n = r.u32().map_err(&fail)? as usize;
        let mut tokens = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            tokens.push(r.string().map_err(&fail)?);
        }
        let vocab = Vocabulary::from_tokens(tokens, header.min_freq, header.max_vocab).map_err(|e| fail(e.to_string()))?;

        let len = r.len64().map_err(&fail)?;
        let lex_text = std::str::from_utf8(r.take(len).map_err(&fail)?).map_err(|_| fail("lexicon block is not UTF-8".into()))?;
        let lexicon = if lex_text.is_empty() {
            None
        } else {
            Some(Lexicon::parse(lex_text, "checkpoint").map_err(|e| fail(e.to_string()))?)
        };

        let n = r.u32().map_err(&fail)? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string().map_err(&fail)?;
            let rank = r.u32().map_err(&fail)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len64().map_err(&fail)?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fail(format!("parameter {name} has an absurd shape")))?;
            let raw = r
                .take(count.checked_mul(8).ok_or_else(|| fail("overflow".into()))?)
                .map_err(&fail)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name.clone(), Tensor::new(shape, data).map_err(|e| fail(format!("{name}: {e}")))?));
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let schema = LabelSchema::new(header.labels).map_err(fail)?;
        if schema.len() != header.model.n_labels {
            return Err(fail("label count disagrees with model".into()));
        }
        if vocab.len() != header.model.encoder.vocab_size {
            return Err(fail("vocabulary size disagrees with model".into()));
        }
        let model = AffectModel::from_arrays(header.model, arrays).map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            model,
            featurizer: Featurizer {
                vocab,
                lexicon,
                max_len: header.max_len,
            },
            schema,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes to a temporary file in the target directory, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len64(&mut self) -> Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format!("length {v} too large"))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "string is not UTF-8".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderVariant};
    use crate::text::preprocess;

    fn sample() -> Checkpoint {
        let corpus = vec![preprocess("happy days @bob"), preprocess("sad days")];
        let vocab = Vocabulary::build(&corpus, 1, 100);
        let mut lexicon = Lexicon::new();
        lexicon.add_category("pos", ["happy"]);
        let schema = LabelSchema::parse("joy\nsadness\n").unwrap();
        let mut config = ModelConfig::new(
            EncoderConfig {
                d_model: 4,
                vocab_size: vocab.len(),
                variant: EncoderVariant::TransformerBlock,
                max_len: 8,
                seed: 3,
            },
            schema.len(),
        );
        config.hidden = 6;
        config.lexicon_dim = 1;
        Checkpoint {
            model: AffectModel::new(config).unwrap(),
            featurizer: Featurizer {
                vocab,
                lexicon: Some(lexicon),
                max_len: 8,
            },
            schema,
            training: Some(TrainingConfig::default()),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.params.flat_values(), ck.model.params.flat_values());
        assert_eq!(back.featurizer, ck.featurizer);
        assert_eq!(back.schema, ck.schema);
    }

    #[test]
    fn corruption_is_reported_with_path() {
        let bytes = sample().to_bytes();
        let p = Path::new("/tmp/model.ckpt");
        for bad in [&bytes[..bytes.len() - 3], &bytes[1..], &[][..]] {
            let err = Checkpoint::from_bytes(bad, p).unwrap_err();
            assert!(err.to_string().contains("/tmp/model.ckpt"));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), ck.to_bytes());
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
