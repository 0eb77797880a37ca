// Copyright 2026 The tamt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Corpus ingestion from plain-text files and a versioned binary cache.
//!
//! Cache layout: magic `TAMTCRP\0`, u32 version, 32-byte SHA-256 key of the
//! inputs, u32 vocabulary size and code points, then the train and dev
//! splits as u32 document counts followed by u32-length-prefixed u32 ids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tamt_core::data::{build_corpus, synthetic_text, Corpus, Split, Vocab};

use crate::error::{IoContext, Result};
use crate::format::{write_atomic, Reader};

const CACHE_MAGIC: &[u8; 8] = b"TAMTCRP\0";

/// Where pre-training text comes from. Without `paths`, a synthetic corpus
/// of `synthetic_sentences` sentences is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub paths: Vec<PathBuf>,
    pub synthetic_sentences: usize,
    pub synthetic_seed: u64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            synthetic_sentences: 8000,
            synthetic_seed: 1,
            dev_fraction: 0.05,
            seed: 0,
        }
    }
}

pub fn read_texts(paths: &[PathBuf]) -> Result<Vec<String>> {
    paths.iter().map(|p| fs::read_to_string(p).at(p)).collect()
}

impl CorpusSpec {
    pub fn texts(&self) -> Result<Vec<String>> {
        if self.paths.is_empty() {
            Ok(vec![synthetic_text(self.synthetic_seed, self.synthetic_sentences)])
        } else {
            read_texts(&self.paths)
        }
    }
}

fn cache_key(texts: &[String], max_len: usize, dev_fraction: f64, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((texts.len() as u64).to_le_bytes());
    for t in texts {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    h.update((max_len as u64).to_le_bytes());
    h.update(dev_fraction.to_le_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

fn encode_cache(key: &[u8; 32], train: &Corpus, dev: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&crate::format::FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(key);
    let chars = train.vocab.chars();
    out.extend_from_slice(&(chars.len() as u32).to_le_bytes());
    for &c in chars {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for corpus in [train, dev] {
        out.extend_from_slice(&(corpus.docs.len() as u32).to_le_bytes());
        for doc in &corpus.docs {
            out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
            for &id in doc {
                out.extend_from_slice(&(id as u32).to_le_bytes());
            }
        }
    }
    out
}

/// Returns `None` when the cache was built from different inputs.
fn decode_cache(bytes: &[u8], path: &Path, key: &[u8; 32]) -> Result<Option<(Corpus, Corpus)>> {
    let mut r = Reader::new(bytes, path);
    r.header(CACHE_MAGIC)?;
    if r.bytes(32)? != key {
        return Ok(None);
    }
    let n = r.u32()? as usize;
    let mut chars = Vec::with_capacity(n);
    for _ in 0..n {
        let cp = r.u32()?;
        chars.push(char::from_u32(cp).ok_or_else(|| r.err(format!("invalid code point {cp}")))?);
    }
    let vocab = Vocab::from_chars(chars);
    let mut split = |tag: Split| -> Result<Corpus> {
        let docs = (0..r.u32()?)
            .map(|_| {
                let len = r.u32()? as usize;
                (0..len).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            docs,
            vocab: vocab.clone(),
            split: tag,
        })
    };
    let train = split(Split::Train)?;
    let dev = split(Split::Dev)?;
    r.finish()?;
    Ok(Some((train, dev)))
}

/// Builds the train/dev corpora, reusing `cache` when it was produced from
/// identical inputs and rewriting it otherwise.
pub fn load_or_build(spec: &CorpusSpec, max_len: usize, cache: Option<&Path>) -> Result<(Corpus, Corpus)> {
    let texts = spec.texts()?;
    let key = cache_key(&texts, max_len, spec.dev_fraction, spec.seed);
    if let Some(path) = cache.filter(|p| p.exists()) {
        let bytes = fs::read(path).at(path)?;
        if let Some(hit) = decode_cache(&bytes, path, &key)? {
            return Ok(hit);
        }
    }
    let (train, dev) = build_corpus(&texts, max_len, spec.dev_fraction, spec.seed)?;
    if let Some(path) = cache {
        write_atomic(path, &encode_cache(&key, &train, &dev))?;
    }
    Ok((train, dev))
}
