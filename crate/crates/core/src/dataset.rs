//! Tokenized corpora and their on-disk container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "AGRD" | version u32 | scheme u8 | merges u32 | vocab_size u32
//! vocab_size x (original_id u32, byte_len u32, utf8 bytes)
//! n_tokens u64 | train_len u64 | zero padding to an 8-byte boundary
//! n_tokens x u32 token ids
//! ```
//!
//! The id array is 8-byte aligned so the file can be memory mapped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, Scheme, Vocab};

pub const DATASET_MAGIC: &[u8; 4] = b"AGRD";
pub const DATASET_VERSION: u32 = 1;
const TRAIN_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub ids: Vec<u32>,
    pub vocab: Vocab,
    pub scheme: Scheme,
    /// Tokens `[0, train_len)` are training data, the rest validation.
    pub train_len: usize,
}

/// Metadata sidecar written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub n_tokens: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub scheme: Scheme,
    pub sources: Vec<PathBuf>,
}

/// 90/10 train/validation boundary.
pub fn split_point(n: usize) -> usize {
    (n as f64 * TRAIN_FRACTION).floor() as usize
}

impl TokenDataset {
    pub fn from_text(text: &str, scheme: Scheme) -> Result<Self> {
        let (ids, vocab) = tokenize(text, scheme)?;
        let train_len = split_point(ids.len());
        Ok(TokenDataset { ids, vocab, scheme, train_len })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn train(&self) -> &[u32] {
        &self.ids[..self.train_len]
    }

    pub fn val(&self) -> &[u32] {
        &self.ids[self.train_len..]
    }

    pub fn split(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => self.train(),
            Split::Val => self.val(),
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.vocab.decode(ids)
    }

    pub fn meta(&self, sources: Vec<PathBuf>) -> DatasetMeta {
        DatasetMeta {
            vocab_size: self.vocab_size(),
            n_tokens: self.ids.len(),
            train_tokens: self.train_len,
            val_tokens: self.ids.len() - self.train_len,
            scheme: self.scheme,
            sources,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.ids.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let (tag, merges) = match self.scheme {
            Scheme::Char => (0u8, 0u32),
            Scheme::SimpleBpe { merges } => (1u8, merges as u32),
        };
        out.push(tag);
        out.extend_from_slice(&merges.to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for (tok, &orig) in self.vocab.tokens.iter().zip(&self.vocab.original_ids) {
            out.extend_from_slice(&orig.to_le_bytes());
            out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
        }
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.train_len as u64).to_le_bytes());
        while out.len() % 8 != 0 {
            out.push(0);
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::Format { kind: "dataset", path: path.to_path_buf(), msg: msg.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| fail("truncated header"))? != DATASET_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header"))?;
        if version != DATASET_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let tag = r.take(1).ok_or_else(|| fail("truncated header"))?[0];
        let merges = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let scheme = match tag {
            0 => Scheme::Char,
            1 => Scheme::SimpleBpe { merges },
            t => return Err(fail(&format!("unknown scheme tag {t}"))),
        };
        let v = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let mut tokens = Vec::with_capacity(v);
        let mut original_ids = Vec::with_capacity(v);
        for _ in 0..v {
            let orig = r.u32().ok_or_else(|| fail("truncated vocabulary"))?;
            let len = r.u32().ok_or_else(|| fail("truncated vocabulary"))? as usize;
            let s = r.take(len).ok_or_else(|| fail("truncated vocabulary"))?;
            tokens.push(String::from_utf8(s.to_vec()).map_err(|_| fail("vocabulary entry is not UTF-8"))?);
            original_ids.push(orig);
        }
        let n = r.u64().ok_or_else(|| fail("truncated header"))? as usize;
        let train_len = r.u64().ok_or_else(|| fail("truncated header"))? as usize;
        while !r.pos.is_multiple_of(8) {
            r.take(1).ok_or_else(|| fail("truncated padding"))?;
        }
        let raw = r.take(n * 4).ok_or_else(|| fail("truncated token array"))?;
        let ids: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if train_len > n {
            return Err(fail("train split longer than corpus"));
        }
        if let Some(pos) = ids.iter().position(|&i| i as usize >= v) {
            return Err(fail(&format!("token id out of range at {pos}")));
        }
        Ok(TokenDataset { ids, vocab: Vocab { tokens, original_ids }, scheme, train_len })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
